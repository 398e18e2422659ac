"""Bearing-run ingestion, RUL labels, manifests and model archives.

PHM12 records are one CSV per snapshot, rows of
``hour, minute, second, microsecond, horizontal_acc, vertical_acc``.
Snapshot times are put on the acquisition grid (index x cadence); the wall
clock in the rows is only used to check that cadence.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nsgpr
from .errors import ConfigurationError, FormatError, IngestionError, InputError, ParseError
from .ndnn import Tensor
from .prosqn import ProSqnModel, build_prosqn
from .tfa import PHM12_SAMPLE_RATE, SNAPSHOT_DURATION, VibrationSnapshot

CADENCE = 10.0
CADENCE_TOLERANCE = 1.0
CHANNEL_COLUMNS = {"horizontal": 4, "vertical": 5}
OPERATING_CONDITIONS = {1: (1800, 4000), 2: (1650, 4200), 3: (1500, 5000)}  # rpm, load N


@dataclass
class BearingRun:
    bearing_id: str
    condition: int
    snapshots: list[VibrationSnapshot]
    t_f: float | None = None
    t_c: float | None = None

    def __post_init__(self):
        if (self.t_f is None) == (self.t_c is None):
            raise InputError(f"bearing {self.bearing_id}: exactly one of t_f / t_c must be set")
        times = self.times
        if times.size > 1:
            gaps = np.diff(times)
            if np.any(gaps <= 0):
                raise IngestionError(f"bearing {self.bearing_id}: timestamps not strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.snapshots], dtype=float)

    @property
    def run_to_failure(self) -> bool:
        return self.t_f is not None

    def truncated(self, t_c: float) -> "BearingRun":
        """Testing-style copy censored at ``t_c`` (snapshots with t <= t_c)."""
        kept = [s for s in self.snapshots if s.timestamp <= t_c + 1e-9]
        return BearingRun(self.bearing_id, self.condition, kept, t_c=kept[-1].timestamp)


def label_rul(run: BearingRun) -> np.ndarray:
    """Rows of (t_i, t_f - t_i) for a run-to-failure bearing."""
    if not run.run_to_failure:
        raise InputError(f"bearing {run.bearing_id} is truncated; RUL labels need a failure time")
    t = run.times
    return np.column_stack([t, run.t_f - t])


@dataclass
class DatasetManifest:
    root: Path
    train: dict[int, list[str]] = field(default_factory=dict)
    test: dict[int, list[str]] = field(default_factory=dict)
    channel: str = "horizontal"
    sample_rate: float = PHM12_SAMPLE_RATE
    cadence: float = CADENCE
    layout: str = "Bearing{id}"
    truth: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.channel not in CHANNEL_COLUMNS:
            raise ConfigurationError(f"channel must be one of {sorted(CHANNEL_COLUMNS)}")
        train_ids = {b for ids in self.train.values() for b in ids}
        test_ids = {b for ids in self.test.values() for b in ids}
        overlap = train_ids & test_ids
        if overlap:
            raise ConfigurationError(f"bearings listed as both training and testing: {sorted(overlap)}")

    @property
    def conditions(self) -> list[int]:
        return sorted(set(self.train) | set(self.test))

    def condition_of(self, bearing_id: str) -> int:
        for table in (self.train, self.test):
            for cond, ids in table.items():
                if bearing_id in ids:
                    return cond
        raise ConfigurationError(f"bearing {bearing_id} is not in the manifest")

    def is_training(self, bearing_id: str) -> bool:
        return any(bearing_id in ids for ids in self.train.values())

    @property
    def testing_ids(self) -> list[str]:
        return [b for c in sorted(self.test) for b in self.test[c]]

    def bearing_dir(self, bearing_id: str) -> Path:
        return self.root / self.layout.format(id=bearing_id)


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _id_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"manifest not found: {path}")
    kv = parse_key_values(path.read_text(), str(path))
    root = Path(kv.pop("root", "."))
    if not root.is_absolute():
        root = path.parent / root
    manifest = DatasetManifest(root=root)
    train, test, truth = {}, {}, {}
    for key, value in kv.items():
        parts = key.split(".")
        if parts[0] == "condition" and len(parts) == 3 and parts[2] in ("train", "test"):
            cond = int(parts[1])
            (train if parts[2] == "train" else test)[cond] = _id_list(value)
        elif parts[0] == "truth" and len(parts) == 2:
            truth[parts[1]] = float(value)
        elif key == "channel":
            manifest.channel = value
        elif key == "sample_rate":
            manifest.sample_rate = float(value)
        elif key == "cadence":
            manifest.cadence = float(value)
        elif key == "layout":
            manifest.layout = value
        else:
            raise ConfigurationError(f"{path}: unknown manifest key {key!r}")
    return DatasetManifest(root, train, test, manifest.channel, manifest.sample_rate, manifest.cadence,
                           manifest.layout, truth)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [
        f"root = {manifest.root}",
        f"channel = {manifest.channel}",
        f"sample_rate = {manifest.sample_rate:g}",
        f"cadence = {manifest.cadence:g}",
        f"layout = {manifest.layout}",
    ]
    for cond in manifest.conditions:
        if cond in manifest.train:
            lines.append(f"condition.{cond}.train = {', '.join(manifest.train[cond])}")
        if cond in manifest.test:
            lines.append(f"condition.{cond}.test = {', '.join(manifest.test[cond])}")
    for bearing, value in sorted(manifest.truth.items()):
        lines.append(f"truth.{bearing} = {value:g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_record(path: Path, n_expected: int) -> np.ndarray:
    text = path.read_text()
    delimiter = ";" if ";" in text.split("\n", 1)[0] else ","
    try:
        data = np.loadtxt(io.StringIO(text), delimiter=delimiter, ndmin=2)
    except ValueError:
        for lineno, line in enumerate(text.splitlines(), 1):
            fields = line.split(delimiter)
            try:
                if len(fields) < 6:
                    raise ValueError
                [float(f) for f in fields]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed row {line!r}") from None
        raise ParseError(f"{path}: unreadable record") from None
    if data.shape[1] < 6:
        raise ParseError(f"{path}:1: expected 6 columns, found {data.shape[1]}")
    if data.shape[0] != n_expected:
        raise IngestionError(f"{path}: expected {n_expected} samples, found {data.shape[0]}")
    return data


def load_bearing(manifest: DatasetManifest, bearing_id: str) -> BearingRun:
    directory = manifest.bearing_dir(bearing_id)
    if not directory.is_dir():
        raise IngestionError(f"bearing directory not found: {directory}")
    files = sorted(directory.glob("acc_*.csv"))
    if not files:
        raise IngestionError(f"no acc_*.csv records in {directory}")
    n_expected = int(round(manifest.sample_rate * SNAPSHOT_DURATION))
    column = CHANNEL_COLUMNS[manifest.channel]
    snapshots, clocks = [], []
    for i, f in enumerate(files):
        data = _read_record(f, n_expected)
        h, m, s, us = data[0, :4]
        clocks.append(h * 3600 + m * 60 + s + us * 1e-6)
        snapshots.append(VibrationSnapshot(i * manifest.cadence, data[:, column], manifest.sample_rate))
    gaps = np.mod(np.diff(clocks), 86400.0)
    bad = np.nonzero(np.abs(gaps - manifest.cadence) > CADENCE_TOLERANCE)[0]
    if bad.size:
        j = int(bad[0])
        raise IngestionError(f"{files[j + 1]}: snapshot gap {gaps[j]:.3f} s breaks the {manifest.cadence:g} s cadence")
    last = snapshots[-1].timestamp
    cond = manifest.condition_of(bearing_id)
    if manifest.is_training(bearing_id):
        return BearingRun(bearing_id, cond, snapshots, t_f=last)
    return BearingRun(bearing_id, cond, snapshots, t_c=last)


def write_bearing_csv(run: BearingRun, directory, start_clock: float = 9 * 3600.0, vertical_seed: int = 0) -> None:
    """Write a run in the PHM12 per-snapshot CSV layout (used for synthetic data)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(vertical_seed)
    for i, snap in enumerate(run.snapshots):
        n = snap.samples.size
        clock = start_clock + snap.timestamp + np.arange(n) / snap.sample_rate
        hour = np.floor(clock / 3600) % 24
        minute = np.floor(clock / 60) % 60
        second = np.floor(clock) % 60
        micro = np.round((clock - np.floor(clock)) * 1e6) % 1e6
        vertical = 0.5 * snap.samples + rng.normal(0.0, 0.05, n)
        rows = np.column_stack([hour, minute, second, micro, snap.samples, vertical])
        buf = io.StringIO()
        np.savetxt(buf, rows, fmt=["%d", "%d", "%d", "%d", "%.6f", "%.6f"], delimiter=",")
        (directory / f"acc_{i + 1:05d}.csv").write_text(buf.getvalue())


# ---------------------------------------------------------------- archives

ARCHIVE_MAGIC = b"VSPR"
ARCHIVE_VERSION = 1
_META = "meta.prosqn"


def _pack_section(name: str, values) -> bytes:
    arr = np.asarray(values, dtype="<f4")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes(order="C")


def archive_bytes(model: ProSqnModel) -> bytes:
    sections = [(_META, [model.width_divisor, model.t_ref, model.rul_scale, model.slope])]
    sections += [(name, p.data) for name, p in model.named_parameters()]
    out = ARCHIVE_MAGIC + struct.pack("<I", ARCHIVE_VERSION) + struct.pack("<I", len(sections))
    return out + b"".join(_pack_section(n, v) for n, v in sections)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated archive")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_archive(raw: bytes, source: str = "<bytes>") -> ProSqnModel:
    r = _Reader(raw, source)
    if r.take(4) != ARCHIVE_MAGIC:
        raise FormatError(f"{source}: not a model archive (bad magic)")
    (version,) = r.unpack("<I")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"{source}: unsupported archive version {version}")
    (count,) = r.unpack("<I")
    sections = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack("<" + "I" * rank) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        sections[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise FormatError(f"{source}: trailing bytes after last section")
    if _META not in sections:
        raise FormatError(f"{source}: archive lacks {_META}")
    width, t_ref, rul_scale, slope = (float(v) for v in sections[_META])
    model = build_prosqn(0, int(width), t_ref=t_ref, rul_scale=rul_scale)
    model.slope = slope
    for name, p in model.named_parameters():
        if name not in sections:
            raise FormatError(f"{source}: missing section {name}")
        if sections[name].shape != p.shape:
            raise FormatError(f"{source}: section {name} has shape {sections[name].shape}, expected {p.shape}")
        p.data = sections[name]
    return model


def save_model(path, model) -> None:
    path = Path(path)
    if isinstance(model, ProSqnModel):
        path.write_bytes(archive_bytes(model))
    elif isinstance(model, nsgpr.GprModel):
        path.write_text(nsgpr.dump_model(model))
    else:
        raise InputError(f"cannot save object of type {type(model).__name__}")


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"model file not found: {path}")
    raw = path.read_bytes()
    if raw.startswith(ARCHIVE_MAGIC):
        return model_from_archive(raw, str(path))
    if raw.startswith(b"kind="):
        return nsgpr.load_model(raw.decode("utf-8"))
    raise FormatError(f"{path}: unrecognized model file")


# ---------------------------------------------------------------- synthetic runs


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale surrogate of a run-to-failure bearing.

    Before onset the signal is the base tones over a faint noise floor. After
    onset, extra tones switch on, and broadband noise and impulse bursts grow
    as exp(-RUL / noise_time_constant), so the end-of-life surge is tied to
    the time left rather than to the fraction of life used.
    """

    seed: int = 0
    lifetime: float = 2000.0
    cadence: float = CADENCE
    sample_rate: float = PHM12_SAMPLE_RATE
    base_tones: tuple = (4000.0,)
    onset_fraction: float = 0.5
    impulse_rate_growth: float = 6.0  # expected impulses per snapshot at failure
    noise_floor: float = 0.05
    extra_tones: tuple = (1800.0, 3800.0, 6000.0)
    noise_peak: float = 1.5
    noise_time_constant: float = 400.0
    bearing_id: str = ""
    condition: int = 1

    def __post_init__(self):
        if not 0 < self.onset_fraction < 1:
            raise InputError(f"onset_fraction must be in (0, 1), got {self.onset_fraction}")
        if not (self.lifetime > 0 and self.cadence > 0 and self.noise_time_constant > 0):
            raise InputError("lifetime and cadence must be positive")
        steps = self.lifetime / self.cadence
        if abs(steps - round(steps)) > 1e-9:
            raise InputError(f"lifetime {self.lifetime} is not a multiple of cadence {self.cadence}")
        nyquist = self.sample_rate / 2
        if any(not 0 < f < nyquist for f in (*self.base_tones, *self.extra_tones)):
            raise InputError("tone frequencies must lie in (0, Nyquist)")


EXTRA_TONE_AMPLITUDE = 0.4


def _severity(spec: SyntheticSpec, t: float) -> float:
    """Fraction of the post-onset span elapsed, in [0, 1]."""
    return min(max((t / spec.lifetime - spec.onset_fraction) / (1 - spec.onset_fraction), 0.0), 1.0)


def _surge(spec: SyntheticSpec, t: float) -> float:
    """Zero until onset, then exp(-RUL/tau) rescaled to reach 1 at failure."""
    if t <= spec.onset_fraction * spec.lifetime:
        return 0.0
    tau = spec.noise_time_constant
    floor = np.exp(-(1 - spec.onset_fraction) * spec.lifetime / tau)
    return float((np.exp(-(spec.lifetime - t) / tau) - floor) / (1 - floor))


def _impulse(rng, n_len: int, sample_rate: float) -> np.ndarray:
    tau = np.arange(n_len) / sample_rate
    carrier = rng.uniform(8000.0, 11000.0)
    return np.exp(-tau / 0.0015) * np.sin(2 * np.pi * carrier * tau)


def generate_synthetic(spec: SyntheticSpec) -> BearingRun:
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.sample_rate * SNAPSHOT_DURATION))
    tau = np.arange(n) / spec.sample_rate
    steps = int(round(spec.lifetime / spec.cadence))
    burst_len = min(n, int(round(0.01 * spec.sample_rate)))
    snapshots = []
    for i in range(steps + 1):
        t = i * spec.cadence
        d = _severity(spec, t)
        g = _surge(spec, t)
        x = np.zeros(n)
        for f in spec.base_tones:
            x += np.sin(2 * np.pi * f * tau + rng.uniform(0, 2 * np.pi))
        if d > 0:
            for f in spec.extra_tones:
                x += EXTRA_TONE_AMPLITUDE * np.sin(2 * np.pi * f * tau + rng.uniform(0, 2 * np.pi))
        sigma = spec.noise_floor + spec.noise_peak * g
        x += rng.normal(0.0, sigma, n)
        count = rng.poisson(spec.impulse_rate_growth * g) if g > 0 else 0
        for _ in range(count):
            start = int(rng.integers(0, n))
            burst = (1 + 3 * g) * rng.uniform(0.5, 1.0) * _impulse(rng, burst_len, spec.sample_rate)
            stop = min(n, start + burst_len)
            x[start:stop] += burst[: stop - start]
        snapshots.append(VibrationSnapshot(float(t), x, spec.sample_rate))
    bearing = spec.bearing_id or f"S{spec.seed}"
    return BearingRun(bearing, spec.condition, snapshots, t_f=float(steps * spec.cadence))
