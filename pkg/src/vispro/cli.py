"""Command-line driver for the two-phase RUL pipeline.

Subcommands: ``synth`` (write a synthetic PHM12-style dataset), ``preprocess``,
``train``, ``predict`` and ``evaluate``. Exit codes: 0 success, 1 user or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio, nsgpr, pipeline, prosqn, scoring
from .errors import ConfigurationError, IngestionError, VisproError
from .plotting import Series, render_svg
from .prosqn import LabeledDataset, TrainConfig
from .tfa import StftConfig, read_tfa, stft, tfa_normalize, write_tfa

log = logging.getLogger("vispro")


@dataclass
class PipelineConfig:
    manifest: Path | None = None
    out: Path = Path("out")
    mode: str = "full"
    seed: int = 0
    levels: tuple = nsgpr.LEVELS
    horizon: float | None = None  # seconds past t_c; None means 0.5 * t_c
    width_divisor: int = 1
    stft: StftConfig = field(default_factory=StftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: nsgpr.SearchConfig = field(default_factory=nsgpr.SearchConfig)
    model_dir: Path | None = None

    def __post_init__(self):
        if self.mode not in pipeline.MODES:
            raise ConfigurationError(f"mode must be one of {', '.join(pipeline.MODES)}")
        if self.horizon is not None and not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")

    @property
    def models(self) -> Path:
        return self.model_dir or self.out / "models"


def parse_levels(text: str) -> tuple:
    try:
        values = tuple(sorted(int(v) / 100 for v in text.split(",") if v.strip()))
    except ValueError:
        raise ConfigurationError(f"levels must be comma-separated percentages, got {text!r}") from None
    bad = [v for v in values if v not in nsgpr.LEVELS]
    if not values or bad:
        raise ConfigurationError(f"supported levels are 80, 90, 95; got {text!r}")
    return values


_TRAIN_KEYS = {"epochs": int, "batch_size": int, "learning_rate": float, "final_lr_fraction": float}
_SEARCH_KEYS = {"restarts": int, "max_iter": int, "support_count": int, "support_span": float}


def load_config(path: Path | None, args: argparse.Namespace) -> PipelineConfig:
    """Config file values, overridden by explicit command-line flags."""
    if path and not Path(path).is_file():
        raise ConfigurationError(f"config file not found: {path}")
    kv = dataio.parse_key_values(Path(path).read_text(), str(path)) if path else {}
    train_kw, search_kw, cfg_kw = {}, {}, {}
    try:
        for key, value in kv.items():
            if key in _TRAIN_KEYS:
                train_kw[key] = _TRAIN_KEYS[key](value)
            elif key in _SEARCH_KEYS:
                search_kw[key] = _SEARCH_KEYS[key](value)
            elif key == "width_divisor":
                cfg_kw[key] = int(value)
            elif key == "window":
                cfg_kw["stft"] = StftConfig(window_kind=value)
            elif key in ("mode", "manifest", "out", "model_dir"):
                cfg_kw[key] = value if key == "mode" else Path(value)
            elif key == "seed":
                cfg_kw[key] = int(value)
            elif key == "levels":
                cfg_kw[key] = parse_levels(value)
            elif key == "horizon":
                cfg_kw[key] = float(value)
            else:
                raise ConfigurationError(f"{path}: unknown config key {key!r}")
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    for name in ("manifest", "out", "mode", "seed", "horizon"):
        value = getattr(args, name, None)
        if value is not None:
            cfg_kw[name] = Path(value) if name in ("manifest", "out") else value
    if getattr(args, "levels", None):
        cfg_kw["levels"] = parse_levels(args.levels)
    seed = cfg_kw.get("seed", 0)
    cfg = PipelineConfig(**cfg_kw)
    cfg.train = replace(TrainConfig(**train_kw), seed=seed)
    cfg.search = replace(nsgpr.SearchConfig(**search_kw), seed=seed)
    return cfg


def _manifest(cfg: PipelineConfig) -> dataio.DatasetManifest:
    if cfg.manifest is None:
        raise ConfigurationError("--manifest is required")
    return dataio.read_manifest(cfg.manifest)


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _g(v) -> str:
    return "" if v is None else f"{v:.10g}"


# ---------------------------------------------------------------- preprocess

def cmd_preprocess(cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    ids = [b for c in manifest.conditions for b in manifest.train.get(c, []) + manifest.test.get(c, [])]
    summary = []
    freqs = np.arange(cfg.stft.n_freq_bins) * manifest.sample_rate / cfg.stft.fft_size
    for bearing in ids:
        run = dataio.load_bearing(manifest, bearing)
        tfa_dir = cfg.out / "tfa" / bearing
        spec_dir = cfg.out / "spectrogram" / bearing
        tfa_dir.mkdir(parents=True, exist_ok=True)
        spec_dir.mkdir(parents=True, exist_ok=True)
        for i, snap in enumerate(run.snapshots):
            try:
                image = stft(snap, cfg.stft)
            except VisproError as exc:
                raise type(exc)(f"bearing {bearing}: {exc}") from exc
            write_tfa(tfa_dir / f"{i:05d}.vtfa", image)
            header = ["freq_hz"] + [f"{t:.6g}" for t in image.window_times]
            rows = [[f"{f:g}"] + [f"{v:.6g}" for v in row] for f, row in zip(freqs, image.values)]
            _write(spec_dir / f"{i:05d}.csv", _csv_text(header, rows))
        role = "train" if manifest.is_training(bearing) else "test"
        last = run.t_f if run.run_to_failure else run.t_c
        summary.append([bearing, run.condition, role, len(run.snapshots), _g(last)])
    _write(cfg.out / "preprocess_summary.csv",
           _csv_text(["bearing", "condition", "role", "snapshots", "t_last"], summary))
    print(f"preprocessed {len(summary)} bearings into {cfg.out}")
    return 0


def _read_images(cfg: PipelineConfig, manifest, bearing: str) -> tuple[np.ndarray, np.ndarray]:
    tfa_dir = cfg.out / "tfa" / bearing
    files = sorted(tfa_dir.glob("*.vtfa"))
    if not files:
        raise IngestionError(f"no preprocessed images for bearing {bearing} in {tfa_dir}; run 'preprocess' first")
    images = [read_tfa(f, cfg.stft, manifest.sample_rate) for f in files]
    times = np.array([im.timestamp for im in images])
    return np.stack([tfa_normalize(im).values for im in images]), times


# ---------------------------------------------------------------- train

def model_path(cfg: PipelineConfig, condition: int) -> Path:
    return cfg.models / f"condition{condition}.vspr"


def cmd_train(cfg: PipelineConfig) -> int:
    manifest = _manifest(cfg)
    if not any(manifest.train.values()):
        raise ConfigurationError("manifest lists no training bearings")
    for condition in sorted(manifest.train):
        parts = []
        for bearing in manifest.train[condition]:
            images, times = _read_images(cfg, manifest, bearing)
            t_f = float(times[-1])
            parts.append(LabeledDataset(images, times, t_f - times, [t_f]))
        model = prosqn.build_prosqn(cfg.train.seed, cfg.width_divisor)
        model, history = prosqn.train(model, LabeledDataset.concatenate(parts), cfg.train)
        path = model_path(cfg, condition)
        path.parent.mkdir(parents=True, exist_ok=True)
        dataio.save_model(path, model)
        _write(path.with_name(f"condition{condition}_loss.csv"),
               _csv_text(["epoch", "loss"], [[i + 1, f"{v:.10g}"] for i, v in enumerate(history)]))
        print(f"condition {condition}: loss {history[0]:.4g} -> {history[-1]:.4g}, model {path}")
    return 0


# ---------------------------------------------------------------- predict

def prediction_dir(cfg: PipelineConfig, mode: str) -> Path:
    return cfg.out / "predictions" / mode


RECORD_FIELDS = ["bearing", "mode", "t_c", "y_hat", "y", "std", "failure_time", "horizon_exceeded"]


def record_csv(rec: pipeline.PredictionRecord, levels) -> str:
    header = list(RECORD_FIELDS)
    row = [rec.bearing, rec.mode, _g(rec.t_c), _g(rec.y_hat), _g(rec.y), _g(rec.std), _g(rec.failure_time),
           int(rec.horizon_exceeded)]
    if rec.mode != "phase1-only":
        for lv in levels:
            tag = round(lv * 100)
            header += [f"lower{tag}", f"upper{tag}"]
            row += [_g(b) for b in rec.bounds[lv]]
    return _csv_text(header, [row])


def posterior_csv(rec: pipeline.PredictionRecord, levels) -> str:
    header = ["t", "mean", "std"]
    for lv in levels:
        tag = round(lv * 100)
        header += [f"lower{tag}", f"upper{tag}"]
    rows = []
    for p in rec.posterior:
        row = [_g(p.t), _g(p.mean), _g(p.std)]
        for lv in levels:
            row += [_g(b) for b in p.bounds[lv]]
        rows.append(row)
    return _csv_text(header, rows)


def prediction_svg(rec: pipeline.PredictionRecord, levels) -> str:
    series = []
    if rec.posterior:
        t = np.array([p.t for p in rec.posterior])
        widest = max(levels)
        series.append(Series(f"ci{round(widest * 100)}", t, np.array([p.bounds[widest][1] for p in rec.posterior]),
                             "band", np.array([p.bounds[widest][0] for p in rec.posterior])))
        series.append(Series("mean", t, np.array([p.mean for p in rec.posterior])))
    series.append(Series("phase1", rec.phase1[:, 0], rec.phase1[:, 1], "points"))
    return render_svg(series, f"RUL estimate, bearing {rec.bearing} ({rec.mode})", "time (s)", "RUL (s)")


def cmd_predict(cfg: PipelineConfig, bearing: str | None) -> int:
    manifest = _manifest(cfg)
    targets = [bearing] if bearing else manifest.testing_ids
    out_dir = prediction_dir(cfg, cfg.mode)
    for b in targets:
        condition = manifest.condition_of(b)
        path = model_path(cfg, condition)
        if not path.is_file():
            raise IngestionError(f"no trained model for condition {condition} at {path}; run 'train' first")
        model = dataio.load_model(path)
        images, times = _read_images(cfg, manifest, b)
        phase1 = np.column_stack([times, prosqn.predict_images(model, images, times)])
        rec = pipeline.phase_two(b, phase1, cfg.mode, cfg.search, cfg.levels, cfg.horizon,
                                 step=manifest.cadence, y=manifest.truth.get(b))
        _write(out_dir / f"{b}_phase1.csv", _csv_text(["t", "rul"], [[_g(t), _g(r)] for t, r in phase1]))
        _write(out_dir / f"{b}_record.csv", record_csv(rec, cfg.levels))
        _write(out_dir / f"{b}.svg", prediction_svg(rec, cfg.levels))
        if rec.gpr is not None:
            _write(out_dir / f"{b}_posterior.csv", posterior_csv(rec, cfg.levels))
            _write(out_dir / f"{b}_gpr.txt", nsgpr.dump_model(rec.gpr))
        status = "horizon exceeded" if rec.horizon_exceeded else f"failure at {_g(rec.failure_time)} s"
        print(f"{b} [{cfg.mode}]: RUL at t_c={_g(rec.t_c)} s is {rec.y_hat:.1f} s"
              + ("" if rec.mode == "phase1-only" else f"; {status}"))
    return 0


# ---------------------------------------------------------------- evaluate

def read_record(path: Path) -> tuple[scoring.BearingResult | None, dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise IngestionError(f"{path}: expected one record row")
    row = rows[0]
    bounds = {}
    for lv in nsgpr.LEVELS:
        tag = round(lv * 100)
        if row.get(f"lower{tag}"):
            bounds[lv] = (float(row[f"lower{tag}"]), float(row[f"upper{tag}"]))
    if not row["y"]:
        return None, row
    return scoring.BearingResult(row["bearing"], float(row["t_c"]), float(row["y_hat"]), float(row["y"]), bounds), row


def read_errors(path: Path) -> list[float]:
    """Percent errors from a CSV with an ``Er`` column (precomputed results)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "Er" not in reader.fieldnames:
            raise IngestionError(f"{path}: needs an 'Er' column")
        try:
            return [float(r["Er"]) for r in reader if r["Er"]]
        except ValueError as exc:
            raise IngestionError(f"{path}: {exc}") from None


def score_csv(scores: dict[str, scoring.Score]) -> str:
    rows = [[m, f"{s.score:.4f}", f"{s.mean_er:.2f}", f"{s.std_er:.2f}", f"{s.mean_abs_er:.2f}", s.n]
            for m, s in scores.items()]
    return _csv_text(["mode", "score", "mean_er", "std_er", "mean_abs_er", "n"], rows)


def cmd_evaluate(cfg: PipelineConfig, errors_file: Path | None = None, modes=None) -> int:
    eval_dir = cfg.out / "evaluation"
    if errors_file is not None:
        s = scoring.aggregate_from_errors(read_errors(errors_file))
        _write(eval_dir / "errors_score.csv", score_csv({"errors": s}))
        print(f"Score {s.score:.4f}  Mean {s.mean_er:.2f}  STD {s.std_er:.2f}  (n={s.n})")
        return 0
    manifest = _manifest(cfg)
    modes = modes or [m for m in pipeline.MODES if prediction_dir(cfg, m).is_dir()]
    if not modes:
        raise IngestionError(f"no predictions under {cfg.out / 'predictions'}; run 'predict' first")
    scores = {}
    for mode in modes:
        results = []
        for b in manifest.testing_ids:
            path = prediction_dir(cfg, mode) / f"{b}_record.csv"
            if not path.is_file():
                raise IngestionError(f"missing prediction for bearing {b} ({mode}): {path}")
            result, _ = read_record(path)
            if result is None:
                raise ConfigurationError(f"bearing {b}: no ground truth (truth.{b}) in manifest")
            results.append(result)
        if not results:
            continue
        _write(eval_dir / f"{mode}_results.csv", scoring.results_table_csv(results, 0.90))
        if mode != "phase1-only":
            _write(eval_dir / f"{mode}_coverage.csv", scoring.coverage_table_csv(results, cfg.levels))
        scores[mode] = scoring.aggregate_score(results)
    _write(eval_dir / "comparison.csv", score_csv(scores))
    for mode, s in scores.items():
        print(f"{mode}: Score {s.score:.4f}  Mean Er {s.mean_er:.2f}  STD {s.std_er:.2f}")
    return 0


# ---------------------------------------------------------------- synth

def cmd_synth(out: Path, n_train: int, n_test: int, lifetime: float, seed: int, truncation: float) -> int:
    """Write a one-condition synthetic dataset in the PHM12 CSV layout plus its manifest."""
    if n_train < 1 or n_test < 0 or not 0 < truncation < 1:
        raise ConfigurationError("need >= 1 training bearing, >= 0 testing bearings and 0 < truncation < 1")
    rng = np.random.default_rng(seed)
    manifest = dataio.DatasetManifest(root=Path("data"), train={1: []}, test={1: []})
    for i in range(n_train + n_test):
        bearing = f"1_{i + 1}"
        life = lifetime * float(rng.uniform(0.8, 1.2)) if i < n_train else lifetime
        life = round(life / dataio.CADENCE) * dataio.CADENCE
        spec = dataio.SyntheticSpec(seed=seed * 1000 + i, lifetime=life, onset_fraction=float(rng.uniform(0.35, 0.55)),
                                    bearing_id=bearing)
        run = dataio.generate_synthetic(spec)
        if i >= n_train:
            t_c = round(truncation * life / dataio.CADENCE) * dataio.CADENCE
            run = run.truncated(t_c)
            manifest.test[1].append(bearing)
            manifest.truth[bearing] = life - run.t_c
        else:
            manifest.train[1].append(bearing)
        dataio.write_bearing_csv(run, out / "data" / f"Bearing{bearing}", vertical_seed=spec.seed)
    if not manifest.test[1]:
        del manifest.test[1]
    dataio.write_manifest(out / "manifest.txt", manifest)
    print(f"wrote {n_train + n_test} synthetic bearings and {out / 'manifest.txt'}")
    return 0


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vispro", description="Two-phase bearing RUL prediction pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, mode=False):
        p.add_argument("--manifest")
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if mode:
            p.add_argument("--mode", choices=pipeline.MODES)
            p.add_argument("--levels", help="comma-separated percentages, e.g. 80,90,95")
        return p

    common(sub.add_parser("preprocess", help="STFT images for every manifest bearing"))
    common(sub.add_parser("train", help="train one Pro-SQN model per operating condition"))
    p = common(sub.add_parser("predict", help="RUL prediction for testing bearings"), mode=True)
    p.add_argument("--bearing")
    p.add_argument("--horizon", type=float, help="extrapolation span past t_c in seconds (default 0.5 t_c)")
    p = common(sub.add_parser("evaluate", help="score predictions"), mode=True)
    p.add_argument("--errors", help="CSV with an Er column to score directly")
    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2)
    p.add_argument("--test", type=int, default=1)
    p.add_argument("--lifetime", type=float, default=2000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--truncation", type=float, default=0.8)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "synth":
        return cmd_synth(Path(args.out), args.train, args.test, args.lifetime, args.seed, args.truncation)
    cfg = load_config(Path(args.config) if args.config else None, args)
    if args.command == "preprocess":
        return cmd_preprocess(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "predict":
        return cmd_predict(cfg, args.bearing)
    modes = [args.mode] if args.mode else None
    return cmd_evaluate(cfg, Path(args.errors) if args.errors else None, modes)


def main(argv=None) -> int:
    try:
        return run(argv)
    except VisproError as exc:
        print(f"vispro: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"vispro: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, OSError) else 1


if __name__ == "__main__":
    sys.exit(main())
