from __future__ import annotations

import time

import numpy as np
import pytest

from vispro import pipeline
from vispro.dataio import SyntheticSpec, generate_synthetic
from vispro.prosqn import TrainConfig


@pytest.fixture(scope="session")
def small_training_runs():
    lifetimes = (700.0, 800.0, 900.0)
    return [
        generate_synthetic(SyntheticSpec(seed=500 + i, lifetime=life, onset_fraction=0.4, noise_time_constant=200.0))
        for i, life in enumerate(lifetimes)
    ]


@pytest.fixture(scope="session")
def small_trained_model(small_training_runs):
    config = TrainConfig(epochs=15, batch_size=16, learning_rate=2e-3, seed=0)
    model, history = pipeline.train_model(small_training_runs, config, width_divisor=8)
    return model, history


@pytest.fixture(scope="session")
def synthetic_suite_timed():
    """The 10-seed desk-scale study: per seed, records for every mode, plus wall time."""
    start = time.perf_counter()
    config = pipeline.SuiteConfig()
    model, history = pipeline.train_model(pipeline.training_runs(config), config.train, config.width_divisor)
    records = {}
    for seed in range(10):
        run, y = pipeline.test_run(seed, config)
        records[seed] = pipeline.evaluate_bearing(model, run, y, config)
    return records, time.perf_counter() - start


@pytest.fixture(scope="session")
def synthetic_suite(synthetic_suite_timed):
    return synthetic_suite_timed[0]


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(key: str, ok: bool, detail: str) -> bool:
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.rstrip("abc")), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


CLI_CONFIG = """# small desk-scale run
epochs = 8
batch_size = 16
learning_rate = 0.002
width_divisor = 8
restarts = 1
max_iter = 400
"""


def run_cli_pipeline(root):
    """synth, preprocess, train, predict (all modes) and evaluate in ``root``; returns exit codes."""
    from vispro.cli import main

    (root / "run.cfg").write_text(CLI_CONFIG)
    common = ["--manifest", str(root / "manifest.txt"), "--config", str(root / "run.cfg"), "--out", str(root / "out")]
    codes = {"synth": main(["synth", "--out", str(root), "--train", "2", "--test", "1", "--lifetime", "600"])}
    codes["preprocess"] = main(["preprocess", *common])
    codes["train"] = main(["train", *common])
    for mode in pipeline.MODES:
        codes[f"predict-{mode}"] = main(["predict", *common, "--mode", mode])
    codes["evaluate"] = main(["evaluate", *common])
    return codes


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """Two independent end-to-end CLI runs with the same seed and config."""
    roots = [tmp_path_factory.mktemp(f"cli{i}") for i in range(2)]
    return [(root, run_cli_pipeline(root)) for root in roots]
