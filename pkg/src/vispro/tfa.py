"""Time-frequency imaging of vibration snapshots.

A snapshot of 2560 accelerometer samples is cut into 64 overlapping frames,
each frame is windowed and Fourier transformed, and the magnitudes of the
lowest 64 one-sided bins become one column of a 64x64 image.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, IngestionError

SNAPSHOT_DURATION = 0.1  # seconds of signal per record
PHM12_SAMPLE_RATE = 25600.0
VTFA_MAGIC = b"VTFA0001"


@dataclass(frozen=True)
class VibrationSnapshot:
    timestamp: float
    samples: np.ndarray
    sample_rate: float = PHM12_SAMPLE_RATE

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.timestamp >= 0:
            raise IngestionError(f"negative snapshot timestamp {self.timestamp}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def expected_length(self) -> int:
        return int(round(self.sample_rate * SNAPSHOT_DURATION))


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 128
    hop: int = 38
    fft_size: int = 128
    window_kind: str = "hann"
    n_time_bins: int = 64
    n_freq_bins: int = 64

    def __post_init__(self):
        if self.frame_length < 1 or self.hop < 1:
            raise ConfigurationError("frame_length and hop must be positive")
        if not _is_power_of_two(self.fft_size) or self.fft_size < self.frame_length:
            raise ConfigurationError(
                f"fft_size must be a power of two >= frame_length, got {self.fft_size}"
            )
        if self.window_kind not in ("hann", "rectangular"):
            raise ConfigurationError(f"unknown window kind {self.window_kind!r}")
        if self.n_freq_bins > self.fft_size // 2:
            raise ConfigurationError("n_freq_bins exceeds fft_size/2")
        if self.n_time_bins < 1 or self.n_freq_bins < 1:
            raise ConfigurationError("image dimensions must be positive")

    @property
    def required_length(self) -> int:
        return (self.n_time_bins - 1) * self.hop + self.frame_length

    def window(self) -> np.ndarray:
        if self.window_kind == "rectangular":
            return np.ones(self.frame_length)
        # periodic Hann
        n = np.arange(self.frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.frame_length)


@dataclass
class TfaImage:
    """Magnitude spectrogram; row = frequency band, column = time window."""

    values: np.ndarray
    band_width_hz: float
    window_times: np.ndarray
    timestamp: float = 0.0
    normalized: bool = field(default=False, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


def dft_oracle(samples) -> np.ndarray:
    """Direct O(n^2) discrete Fourier transform, used to check `fft`."""
    x = np.asarray(samples, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ basis.T


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(samples, size: int | None = None) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis.

    Input shorter than `size` is zero-padded. Leading axes are treated as a batch.
    """
    x = np.asarray(samples, dtype=np.complex128)
    if size is None:
        size = x.shape[-1]
    if not _is_power_of_two(size):
        raise ConfigurationError(f"FFT size must be a power of two, got {size}")
    if x.shape[-1] > size:
        raise ConfigurationError(f"input length {x.shape[-1]} exceeds FFT size {size}")
    if x.shape[-1] < size:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, size - x.shape[-1])]
        x = np.pad(x, pad)
    batch = x.shape[:-1]
    x = x[..., _bit_reverse_indices(size)]
    half = 1
    while half < size:
        step = 2 * half
        twiddle = np.exp(-2j * np.pi * np.arange(half) / step)
        blocks = x.reshape(*batch, size // step, step)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(*batch, size)
        half = step
    return x


def stft(snapshot: VibrationSnapshot, config: StftConfig = StftConfig()) -> TfaImage:
    samples = snapshot.samples
    if samples.shape[0] < config.required_length:
        raise IngestionError(
            f"snapshot at t={snapshot.timestamp} s has {samples.shape[0]} samples; "
            f"tiling needs {config.required_length}"
        )
    starts = np.arange(config.n_time_bins) * config.hop
    frames = samples[starts[:, None] + np.arange(config.frame_length)]
    spectra = fft(frames * config.window(), config.fft_size)
    magnitude = np.abs(spectra[:, : config.n_freq_bins]).T
    centers = (starts + config.frame_length / 2.0) / snapshot.sample_rate
    return TfaImage(
        values=magnitude.astype(np.float32),
        band_width_hz=snapshot.sample_rate / config.fft_size,
        window_times=centers,
        timestamp=float(snapshot.timestamp),
    )


def tfa_normalize(image: TfaImage) -> TfaImage:
    """log1p followed by per-image min-max scaling to [0, 1]."""
    logged = np.log1p(np.asarray(image.values, dtype=np.float64))
    lo, hi = logged.min(), logged.max()
    if hi > lo:
        scaled = (logged - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(logged)
    return TfaImage(
        values=scaled.astype(np.float32),
        band_width_hz=image.band_width_hz,
        window_times=image.window_times,
        timestamp=image.timestamp,
        normalized=True,
    )


def write_tfa(path, image: TfaImage) -> None:
    values = np.asarray(image.values, dtype="<f4")
    if values.shape != (64, 64):
        raise FormatError(f"VTFA files hold 64x64 images, got {values.shape}")
    payload = VTFA_MAGIC + struct.pack("<d", image.timestamp) + values.tobytes(order="C")
    Path(path).write_bytes(payload)


def read_tfa(path, config: StftConfig = StftConfig(), sample_rate: float = PHM12_SAMPLE_RATE) -> TfaImage:
    raw = Path(path).read_bytes()
    expected = len(VTFA_MAGIC) + 8 + 64 * 64 * 4
    if raw[: len(VTFA_MAGIC)] != VTFA_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    (timestamp,) = struct.unpack_from("<d", raw, len(VTFA_MAGIC))
    values = np.frombuffer(raw, dtype="<f4", offset=len(VTFA_MAGIC) + 8).reshape(64, 64)
    starts = np.arange(config.n_time_bins) * config.hop
    return TfaImage(
        values=values.astype(np.float32),
        band_width_hz=sample_rate / config.fft_size,
        window_times=(starts + config.frame_length / 2.0) / sample_rate,
        timestamp=timestamp,
    )
