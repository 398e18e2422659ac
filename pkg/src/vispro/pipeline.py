"""Two-phase RUL pipeline: Pro-SQN trajectory, then NSGPR smoothing and extrapolation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nsgpr, prosqn
from .dataio import BearingRun, SyntheticSpec, generate_synthetic, label_rul
from .errors import InputError
from .prosqn import LabeledDataset, ProSqnModel, TrainConfig
from .scoring import BearingResult
from .tfa import StftConfig, stft, tfa_normalize

log = logging.getLogger(__name__)

MODES = ("full", "phase1-only", "se-baseline")


def run_images(run: BearingRun, config: StftConfig = StftConfig()) -> np.ndarray:
    """Normalized TFA images, one per snapshot, shape (n, 64, 64)."""
    if not run.snapshots:
        return np.zeros((0, config.n_freq_bins, config.n_time_bins), dtype=np.float32)
    return np.stack([tfa_normalize(stft(s, config)).values for s in run.snapshots])


def labeled_dataset(runs: list[BearingRun], config: StftConfig = StftConfig()) -> LabeledDataset:
    if not runs:
        raise InputError("no training bearings")
    parts = []
    for run in runs:
        labels = label_rul(run)
        parts.append(LabeledDataset(run_images(run, config), labels[:, 0], labels[:, 1], [run.t_f]))
    return LabeledDataset.concatenate(parts)


def train_model(
    runs: list[BearingRun],
    train_config: TrainConfig = TrainConfig(),
    width_divisor: int = 1,
    stft_config: StftConfig = StftConfig(),
) -> tuple[ProSqnModel, list[float]]:
    model = prosqn.build_prosqn(train_config.seed, width_divisor)
    return prosqn.train(model, labeled_dataset(runs, stft_config), train_config)


def search_config_for(mode: str, base: nsgpr.SearchConfig) -> nsgpr.SearchConfig:
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    kind = "se" if mode == "se-baseline" else "local"
    return nsgpr.SearchConfig(
        seed=base.seed,
        restarts=base.restarts,
        max_iter=base.max_iter,
        kind=kind,
        support_count=base.support_count,
        support_span=base.support_span,
        restart_scale=base.restart_scale,
    )


@dataclass
class PredictionRecord:
    """Outcome for one testing bearing under one mode."""

    bearing: str
    mode: str
    t_c: float
    y_hat: float
    y: float | None
    phase1: np.ndarray  # rows (t, rul)
    bounds: dict = field(default_factory=dict)  # level -> (lower, upper)
    std: float | None = None
    failure_time: float | None = None
    horizon_exceeded: bool = False
    posterior: list = field(default_factory=list)  # RulPrediction over the plot grid
    gpr: nsgpr.GprModel | None = None

    def result(self) -> BearingResult:
        if self.y is None:
            raise InputError(f"bearing {self.bearing}: ground truth unknown")
        return BearingResult(self.bearing, self.t_c, self.y_hat, self.y, dict(self.bounds))

    def oscillation(self) -> float:
        """Mean |successive difference| of the posterior mean beyond t_c."""
        means = np.array([p.mean for p in self.posterior if p.t > self.t_c])
        return float(np.mean(np.abs(np.diff(means)))) if means.size > 1 else 0.0


def phase_two(
    bearing: str,
    phase1: np.ndarray,
    mode: str = "full",
    search: nsgpr.SearchConfig = nsgpr.SearchConfig(),
    levels=nsgpr.LEVELS,
    horizon: float | None = None,
    step: float = 10.0,
    y: float | None = None,
) -> PredictionRecord:
    """Turn a Phase-I trajectory into a prediction record for ``mode``."""
    if len(phase1) == 0:
        raise InputError(f"bearing {bearing}: empty trajectory")
    t_c = float(phase1[-1, 0])
    if mode == "phase1-only":
        search_config_for(mode, search)
        return PredictionRecord(bearing, mode, t_c, float(phase1[-1, 1]), y, phase1)
    horizon = 0.5 * t_c if horizon is None else float(horizon)
    dataset = nsgpr.GprDataset.from_trajectory(phase1[:, 0], phase1[:, 1])
    gpr = nsgpr.fit(dataset, search_config_for(mode, search))
    at_tc = nsgpr.predict_rul(gpr, [t_c], levels)[0]
    failure = nsgpr.predict_failure_time(gpr, t_c, horizon, step=step)
    n_steps = int(np.floor((t_c + horizon - phase1[0, 0]) / step + 1e-9))
    grid = phase1[0, 0] + np.arange(n_steps + 1) * step
    return PredictionRecord(
        bearing, mode, t_c, at_tc.mean, y, phase1,
        bounds=dict(at_tc.bounds), std=at_tc.std,
        failure_time=failure.failure_time, horizon_exceeded=failure.horizon_exceeded,
        posterior=nsgpr.predict_rul(gpr, grid, levels), gpr=gpr,
    )


# ---------------------------------------------------------------- synthetic suite

@dataclass(frozen=True)
class SuiteConfig:
    """Desk-scale study: one model trained on synthetic bearings, tested on seeded ones."""

    train_lifetimes: tuple = (1500.0, 1750.0, 2000.0, 2250.0, 2500.0)
    test_lifetime: float = 2000.0
    width_divisor: int = 8
    train: TrainConfig = TrainConfig(epochs=40, batch_size=16, learning_rate=2e-3, seed=0)
    search: nsgpr.SearchConfig = nsgpr.SearchConfig(restarts=3, max_iter=1000)
    truncation_range: tuple = (0.75, 0.90)
    onset_range: tuple = (0.35, 0.55)


def training_runs(config: SuiteConfig) -> list[BearingRun]:
    runs = []
    rng = np.random.default_rng(10_000)
    for i, life in enumerate(config.train_lifetimes):
        onset = float(rng.uniform(*config.onset_range))
        spec = SyntheticSpec(seed=10_000 + i, lifetime=life, onset_fraction=onset, bearing_id=f"T{i + 1}")
        runs.append(generate_synthetic(spec))
    return runs


def test_run(seed: int, config: SuiteConfig) -> tuple[BearingRun, float]:
    """Truncated synthetic testing bearing and its true RUL at truncation."""
    rng = np.random.default_rng(seed)
    onset = float(rng.uniform(*config.onset_range))
    full = generate_synthetic(SyntheticSpec(seed=seed, lifetime=config.test_lifetime, onset_fraction=onset,
                                            bearing_id=f"S{seed}"))
    frac = float(rng.uniform(*config.truncation_range))
    cadence = full.snapshots[1].timestamp - full.snapshots[0].timestamp
    t_c = np.floor(frac * config.test_lifetime / cadence) * cadence
    cut = full.truncated(t_c)
    return cut, full.t_f - cut.t_c


def evaluate_bearing(model: ProSqnModel, run: BearingRun, y: float | None, config: SuiteConfig,
                     modes=MODES, levels=nsgpr.LEVELS) -> dict[str, PredictionRecord]:
    phase1 = prosqn.predict_trajectory(model, run.snapshots)
    return {m: phase_two(run.bearing_id, phase1, m, config.search, levels, y=y) for m in modes}
