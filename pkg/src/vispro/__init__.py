"""Bearing remaining-useful-life prediction from vibration spectrograms.

Phase I maps each STFT image plus its timestamp to a RUL estimate with a
compact SqueezeNet-style regressor (:mod:`vispro.prosqn`, built on the numpy
autograd in :mod:`vispro.ndnn`). Phase II fits a nonstationary Gaussian process
to that trajectory (:mod:`vispro.nsgpr`) for a smoothed RUL with confidence
bounds and an extrapolated failure time.
"""

from .errors import VisproError

__all__ = ["VisproError"]
__version__ = "0.1.0"
