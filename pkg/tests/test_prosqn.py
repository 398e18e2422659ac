from __future__ import annotations

import numpy as np
import pytest

from gradcheck import prosqn_gradient_errors, reduced_instance
from vispro import ndnn, prosqn
from vispro.dataio import SyntheticSpec, generate_synthetic
from vispro.errors import AuditError, InputError, ShapeError, TrainingError
from vispro.ndnn import Tensor
from vispro.prosqn import (
    FIRE_SPECS,
    REFERENCE_TABLE,
    FireModule,
    LabeledDataset,
    TrainConfig,
    audit_architecture,
    build_prosqn,
    fire_forward,
    forward,
    predict_trajectory,
    train,
)


def _fire(name, seed=0, c_in=None):
    spec = FIRE_SPECS[name]
    rng = np.random.default_rng(seed)
    c_in = c_in or {"Fire2": 32, "Fire8": 384}[name]
    return FireModule(
        spec,
        ndnn.init_conv(rng, 1, c_in, spec.squeeze),
        ndnn.init_conv(rng, 1, spec.squeeze, spec.expand1x1),
        ndnn.init_conv(rng, 3, spec.squeeze, spec.expand3x3, padding=1),
    )


def _zero_model(model):
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    return model


class TestFire:
    def test_fire2(self):
        fire = _fire("Fire2")
        out = fire_forward(Tensor(np.zeros((15, 15, 32), np.float32)), fire)
        assert out.shape == (1, 15, 15, 64)
        assert fire.weight_count == 5632

    def test_fire8(self):
        fire = _fire("Fire8")
        out = fire_forward(Tensor(np.ones((3, 3, 384), np.float32)), fire)
        assert out.shape == (1, 3, 3, 512)
        assert fire.weight_count == 188_416

    def test_zero_in_zero_out(self):
        out = fire_forward(Tensor(np.zeros((15, 15, 32))), _fire("Fire2"))
        assert np.all(out.data == 0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            fire_forward(Tensor(np.zeros((15, 15, 31))), _fire("Fire2"))

    def test_spec_validation(self):
        with pytest.raises(InputError):
            prosqn.FireSpec(0, 32, 32)
        assert FIRE_SPECS["Fire9"].out_channels == 512


class TestBuildAndAudit:
    def test_total_weights(self):
        assert build_prosqn(7).weight_count == 1_244_234

    def test_seeded_builds_identical(self):
        a, b = build_prosqn(3), build_prosqn(3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()

    def test_den2_takes_five_inputs(self):
        assert build_prosqn(0).layers["Den2"].weights.shape == (5, 100)

    def test_audit_matches_reference_rows(self):
        report = audit_architecture(build_prosqn(1))
        assert report.total_bytes == 623_260
        assert report.total_weights == 1_244_234
        ref = {name: (shape, mem, w) for name, shape, mem, w in REFERENCE_TABLE}
        rows = {r.layer: r for r in report.rows}
        assert rows["Conv1"].memory_bytes == 115_200 and rows["Conv1"].weights == 1152
        assert rows["Den2"].memory_bytes == 400 and rows["Den2"].weights == 500
        for name, (shape, mem, w) in ref.items():
            assert (rows[name].output_shape, rows[name].memory_bytes, rows[name].weights) == (shape, mem, w)

    def test_audit_names_first_divergent_layer(self):
        reference = [list(r) for r in REFERENCE_TABLE]
        for row in reference:
            if row[0] == "Fire4":
                row[3] += 1
        with pytest.raises(AuditError, match="Fire4"):
            audit_architecture(build_prosqn(0), [tuple(r) for r in reference])

    def test_reduced_width(self):
        model = build_prosqn(0, width_divisor=8)
        report = audit_architecture(model)
        assert report.total_weights == model.weight_count == 23_490

    def test_bad_divisor(self):
        with pytest.raises(InputError):
            build_prosqn(0, width_divisor=3)

    def test_audit_csv(self):
        text = audit_architecture(build_prosqn(0, width_divisor=8)).to_csv()
        assert text.splitlines()[0].startswith("layer")


class TestForward:
    def test_zero_network(self):
        model = _zero_model(build_prosqn(0, width_divisor=8))
        assert forward(model, np.zeros((64, 64)), 100.0) == 0.0

    def test_repeatable(self):
        model = build_prosqn(42)
        image = np.full((64, 64), 0.5, np.float32)
        assert forward(model, image, 0.0) == forward(model, image, 0.0)

    def test_time_changes_output(self):
        model = build_prosqn(42, width_divisor=8, t_ref=1000.0)
        model.layers["Den2"].weights.data[4, :] = 0.5
        image = np.full((64, 64), 0.5, np.float32)
        assert forward(model, image, 0.0) != forward(model, image, 500.0)

    def test_time_injection_is_affine(self):
        model = _zero_model(build_prosqn(0, width_divisor=8, t_ref=1000.0))
        model.layers["Den2"].weights.data[4, :] = 0.3
        model.layers["Den3"].weights.data[:] = 0.1
        model.layers["Den4"].weights.data[:] = 0.2
        image = np.zeros((64, 64), np.float32)
        ys = [forward(model, image, t) for t in (100.0, 400.0, 900.0)]
        # leaky-ReLU is linear on the positive side, so y is exactly affine in t
        slope = (ys[1] - ys[0]) / 300.0
        assert ys[2] == pytest.approx(ys[1] + 500.0 * slope, rel=1e-5)
        assert slope > 0

    def test_rejects_unnormalized(self):
        with pytest.raises(InputError):
            forward(build_prosqn(0, width_divisor=8), np.full((64, 64), 1.5), 0.0)

    def test_rejects_wrong_shape(self):
        with pytest.raises(InputError):
            forward(build_prosqn(0, width_divisor=8), np.zeros((32, 64)), 0.0)

    def test_layer_shapes_follow_reference(self):
        trace = []
        prosqn.forward_batch(build_prosqn(0), np.zeros((1, 64, 64), np.float32), np.zeros(1), trace=trace)
        shapes = {name: shape for name, shape, _ in trace}
        for name, shape, _, _ in REFERENCE_TABLE:
            if name in shapes:
                assert shapes[name] == shape


class TestGradients:
    def test_reduced_model_end_to_end(self):
        model, images, times, targets = reduced_instance(3)
        errors = prosqn_gradient_errors(model, images, times, targets, step=1e-5, floor=1e-5)
        assert len(errors) == len(model.parameters())
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-3, f"{worst}: {errors[worst]:.3e}"


def _dataset(n=200, seed=0):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0, 1000, n))
    rul = 1000.0 - times
    images = rng.uniform(0, 0.2, (n, 64, 64)).astype(np.float32)
    # brightness grows as RUL shrinks, so the images are informative
    images += (0.8 * (1 - rul / 1000.0))[:, None, None].astype(np.float32)
    return LabeledDataset(images, times, rul, [1000.0])


class TestTrain:
    def test_converges(self):
        model = build_prosqn(0, width_divisor=8)
        _, history = train(model, _dataset(), TrainConfig(epochs=30, batch_size=32, seed=0))
        assert history[-1] < 0.5 * history[0]
        assert history[-1] <= 1.05 * min(history)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=4)
        data = _dataset(48)
        _, h1 = train(build_prosqn(1, width_divisor=8), data, cfg)
        _, h2 = train(build_prosqn(1, width_divisor=8), data, cfg)
        assert h1 == h2

    def test_zero_learning_rate_keeps_parameters(self):
        model = build_prosqn(2, width_divisor=8)
        before = [p.data.copy() for p in model.parameters()]
        train(model, _dataset(32), TrainConfig(epochs=2, batch_size=8, learning_rate=0.0))
        for b, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(b, p.data)

    def test_duplicated_dataset_same_first_step(self):
        data = _dataset(24, seed=5)
        doubled = LabeledDataset.concatenate([data, data])
        a = build_prosqn(3, width_divisor=8).astype(np.float64)
        b = build_prosqn(3, width_divisor=8).astype(np.float64)
        train(a, data, TrainConfig(epochs=1, batch_size=24, seed=0))
        train(b, doubled, TrainConfig(epochs=1, batch_size=48, seed=0))
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_allclose(pa.data, pb.data, rtol=1e-9, atol=1e-12)

    def test_sets_normalizers(self):
        model, _ = train(build_prosqn(0, width_divisor=8), _dataset(16), TrainConfig(epochs=1))
        assert model.t_ref == 1000.0 and model.rul_scale == 1000.0

    def test_empty_dataset(self):
        empty = LabeledDataset(np.zeros((0, 64, 64), np.float32), np.zeros(0), np.zeros(0))
        with pytest.raises(InputError):
            train(build_prosqn(0, width_divisor=8), empty)

    def test_nan_loss_names_epoch(self):
        data = _dataset(8)
        data.rul[:] = np.nan
        with pytest.raises(TrainingError, match="epoch 0"):
            train(build_prosqn(0, width_divisor=8), data, TrainConfig(epochs=1, batch_size=8, rul_scale=1.0))

    @pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(rul_scale=-1.0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(InputError):
            TrainConfig(**kwargs)


class TestPredictTrajectory:
    def test_empty(self):
        assert predict_trajectory(build_prosqn(0, width_divisor=8), []).shape == (0, 2)

    def test_arity_and_times(self):
        run = generate_synthetic(SyntheticSpec(seed=1, lifetime=50.0))
        out = predict_trajectory(build_prosqn(0, width_divisor=8), run.snapshots)
        assert out.shape == (6, 2)
        np.testing.assert_array_equal(out[:, 0], run.times)

    def test_unordered_rejected(self):
        run = generate_synthetic(SyntheticSpec(seed=1, lifetime=20.0))
        with pytest.raises(InputError):
            predict_trajectory(build_prosqn(0, width_divisor=8), run.snapshots[::-1])

    def test_trained_trajectory_decreases(self, small_trained_model):
        model, history = small_trained_model
        run = generate_synthetic(SyntheticSpec(seed=77, lifetime=800.0, onset_fraction=0.4, noise_time_constant=200.0))
        out = predict_trajectory(model, run.snapshots)
        r = np.corrcoef(out[:, 0], out[:, 1])[0, 1]
        assert r < -0.5
