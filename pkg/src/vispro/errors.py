"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to:
1 for user/configuration errors, 2 for data errors, 3 for numerical failures.
"""

from __future__ import annotations


class VisproError(Exception):
    exit_code = 1


class ConfigurationError(VisproError):
    """Invalid configuration value (e.g. FFT size not a power of two)."""


class InputError(VisproError, ValueError):
    """A caller passed an argument outside an operation's domain."""


class ParameterError(InputError):
    """Invalid kernel or model hyperparameter."""


class ShapeError(InputError):
    """Tensor shapes are incompatible."""


class IngestionError(VisproError):
    exit_code = 2


class ParseError(IngestionError):
    pass


class FormatError(IngestionError):
    """Binary archive or image file is malformed."""


class NumericalError(VisproError):
    exit_code = 3


class TrainingError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class AuditError(NumericalError):
    """Model architecture does not match the reference layer table."""
