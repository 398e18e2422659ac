from __future__ import annotations

import numpy as np
import pytest

from vispro import ndnn
from vispro.errors import ShapeError
from vispro.ndnn import ConvLayer, DenseLayer, OptimizerState, Tensor, parameter

FD_STEP = 1e-3
FD_TOL = 1e-3


def _conv(kernel, bias=None, stride=1, padding=0, dtype=np.float64):
    kernel = np.asarray(kernel, dtype=float)
    bias = np.zeros(kernel.shape[-1]) if bias is None else bias
    return ConvLayer(parameter(kernel, dtype), parameter(bias, dtype), stride=stride, padding=padding)


def _dense(weights, bias, dtype=np.float64):
    return DenseLayer(parameter(weights, dtype), parameter(bias, dtype))


def _check_grads(loss_fn, params, step=FD_STEP, tol=FD_TOL):
    for p in params:
        p.grad = None
    ndnn.backward(loss_fn())
    for p in params:
        analytic = p.grad.copy()
        numeric = ndnn.numerical_gradient(lambda: float(loss_fn().data), p, step)
        err = ndnn.relative_error(analytic, numeric, floor=1e-6)
        assert err.max() < tol, f"max relative error {err.max():.3e}"


class TestConv2d:
    def test_conv1_shape(self):
        layer = ndnn.init_conv(np.random.default_rng(0), 6, 1, 32, stride=2)
        out = ndnn.conv2d(Tensor(np.zeros((64, 64, 1), np.float32)), layer)
        assert out.shape == (1, 30, 30, 32)
        assert layer.weight_count == 6 * 6 * 1 * 32 == 1152

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(5, 7, 1))
        out = ndnn.conv2d(Tensor(x), _conv(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data[0], x)

    def test_ones_by_hand(self):
        out = ndnn.conv2d(Tensor(np.ones((3, 3, 1))), _conv(np.ones((2, 2, 1, 1))))
        np.testing.assert_array_equal(out.data[0, :, :, 0], np.full((2, 2), 4.0))

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(9, 8, 3))
        k = rng.normal(size=(3, 2, 3, 4))
        b = rng.normal(size=4)
        out = ndnn.conv2d(Tensor(x), _conv(k, b, stride=2)).data[0]
        ho, wo = (9 - 3) // 2 + 1, (8 - 2) // 2 + 1
        ref = np.zeros((ho, wo, 4))
        for i in range(ho):
            for j in range(wo):
                patch = x[2 * i : 2 * i + 3, 2 * j : 2 * j + 2, :]
                ref[i, j] = np.tensordot(patch, k, axes=3) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_padding_keeps_size(self):
        out = ndnn.conv2d(Tensor(np.ones((15, 15, 2))), _conv(np.ones((3, 3, 2, 4)), padding=1))
        assert out.shape == (1, 15, 15, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(1, 4, 4, 2\)"):
            ndnn.conv2d(Tensor(np.ones((4, 4, 2))), _conv(np.ones((1, 1, 3, 1))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=(5, 5, 2)), np.float64)
        layer = _conv(rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2))
        target = rng.normal(size=(1, 3, 3, 2))
        _check_grads(lambda: ndnn.mse_loss(ndnn.conv2d(x, layer), target), [x, *layer.parameters()])

    def test_strided_padded_gradients(self):
        rng = np.random.default_rng(4)
        x = parameter(rng.normal(size=(2, 6, 6, 2)), np.float64)
        layer = _conv(rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3), stride=2, padding=1)
        target = rng.normal(size=(2, 3, 3, 3))
        _check_grads(lambda: ndnn.mse_loss(ndnn.conv2d(x, layer), target), [x, *layer.parameters()])


class TestPooling:
    @pytest.mark.parametrize("dim,expected", [(30, 15), (15, 7), (7, 3), (3, 1), (1, 1), (4, 2)])
    def test_output_size(self, dim, expected):
        assert ndnn.pool_output_size(dim) == expected
        out = ndnn.maxpool2d(Tensor(np.zeros((dim, dim, 2))))
        assert out.shape == (1, expected, expected, 2)

    def test_constant_input(self):
        out = ndnn.maxpool2d(Tensor(np.full((7, 7, 3), 2.5)))
        np.testing.assert_array_equal(out.data, 2.5)

    def test_border_window_is_clipped(self):
        x = np.zeros((4, 4, 1))
        x[3, 3, 0] = 9.0
        x[0, 0, 0] = -1.0
        out = ndnn.maxpool2d(Tensor(x)).data[0, :, :, 0]
        # second window covers rows/cols 2..3 only (index 4 is out of range)
        assert out[1, 1] == 9.0 and out[0, 0] == 0.0

    def test_permutation_invariance_within_window(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 3, 1))
        perm = rng.permutation(9)
        y = x.reshape(9, 1)[perm].reshape(3, 3, 1)
        assert ndnn.maxpool2d(Tensor(x)).data.item() == ndnn.maxpool2d(Tensor(y)).data.item()

    def test_gradient_routes_to_argmax(self):
        x = parameter(np.array([[1.0, 5.0, 2.0], [0.0, 3.0, 4.0], [-1.0, 2.0, 0.5]])[:, :, None], np.float64)
        out = ndnn.maxpool2d(x)
        ndnn.backward(ndnn.mse_loss(out, np.zeros(1)))
        expected = np.zeros((3, 3, 1))
        expected[0, 1, 0] = 2 * 5.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_maxpool_gradients(self):
        rng = np.random.default_rng(6)
        x = parameter(rng.normal(size=(4, 4, 2)), np.float64)
        target = rng.normal(size=(1, 2, 2, 2))
        _check_grads(lambda: ndnn.mse_loss(ndnn.maxpool2d(x), target), [x])

    def test_global_shapes_and_values(self):
        out = ndnn.global_maxpool(Tensor(np.random.default_rng(7).normal(size=(3, 3, 1024))))
        assert out.shape == (1, 1, 1, 1024)
        single = np.array([[[0.3, -2.0]]])
        np.testing.assert_array_equal(ndnn.global_maxpool(Tensor(single)).data.reshape(-1), [0.3, -2.0])
        negatives = np.array([-3.0, -1.0, -2.0]).reshape(1, 3, 1)
        assert ndnn.global_maxpool(Tensor(negatives)).data.item() == -1.0

    def test_global_gradients(self):
        rng = np.random.default_rng(8)
        x = parameter(rng.normal(size=(3, 4, 3)), np.float64)
        target = rng.normal(size=(1, 1, 1, 3))
        _check_grads(lambda: ndnn.mse_loss(ndnn.global_maxpool(x), target), [x])


class TestLeakyRelu:
    def test_values(self):
        out = ndnn.leaky_relu(Tensor(np.array([1.0, -1.0, 0.0]))).data
        np.testing.assert_allclose(out, [1.0, -0.01, 0.0])

    def test_slopes(self):
        x = parameter(np.array([2.0, -2.0]), np.float64)
        y = ndnn.leaky_relu(x)
        ndnn.backward(ndnn.mse_loss(y, np.zeros(2)))
        # d/dx of mean(y^2) = y * slope
        np.testing.assert_allclose(x.grad, [2.0 * 1.0, -0.02 * 0.01])

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = parameter(rng.normal(size=(3, 4)), np.float64)
        x.data[np.abs(x.data) < 0.01] = 0.5  # keep away from the kink
        target = rng.normal(size=(3, 4))
        _check_grads(lambda: ndnn.mse_loss(ndnn.leaky_relu(x), target), [x])


class TestDense:
    def test_den1_shape(self):
        layer = ndnn.init_dense(np.random.default_rng(0), 1024, 4)
        assert ndnn.dense(Tensor(np.zeros(1024, np.float32)), layer).shape == (4,)
        assert layer.weight_count == 4096

    def test_identity(self):
        out = ndnn.dense(Tensor(np.array([3.0, 5.0])), _dense(np.eye(2), np.zeros(2)))
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_column_per_output(self):
        out = ndnn.dense(Tensor(np.array([1.0, 1.0])), _dense([[1, 2], [3, 4]], [1, 1]))
        np.testing.assert_array_equal(out.data, [5.0, 7.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ndnn.dense(Tensor(np.ones(3)), _dense(np.eye(2), np.zeros(2)))

    def test_single_weight_gradient(self):
        layer = _dense([[0.7]], [0.0])
        x = np.array([[1.5]])
        _check_grads(lambda: ndnn.mse_loss(ndnn.dense(Tensor(x), layer), [[2.0]]), layer.parameters())

    def test_gradients(self):
        rng = np.random.default_rng(10)
        x = parameter(rng.normal(size=(4, 3)), np.float64)
        layer = _dense(rng.normal(size=(3, 2)), rng.normal(size=2))
        target = rng.normal(size=(4, 2))
        _check_grads(lambda: ndnn.mse_loss(ndnn.dense(x, layer), target), [x, *layer.parameters()])


class TestConcatAndLoss:
    def test_concat_gradients(self):
        rng = np.random.default_rng(11)
        a = parameter(rng.normal(size=(2, 3)), np.float64)
        b = parameter(rng.normal(size=(2, 1)), np.float64)
        target = rng.normal(size=(2, 4))
        _check_grads(lambda: ndnn.mse_loss(ndnn.concat([a, b]), target), [a, b])

    def test_mse_value_and_gradient(self):
        pred = parameter(np.array([1.0, 3.0]), np.float64)
        loss = ndnn.mse_loss(pred, [0.0, 1.0])
        assert float(loss.data) == pytest.approx(2.5)
        ndnn.backward(loss)
        np.testing.assert_allclose(pred.grad, [1.0, 2.0])

    def test_shared_input_accumulates(self):
        x = parameter(np.array([2.0]), np.float64)
        loss = ndnn.mse_loss(ndnn.concat([x, x]), [0.0, 0.0])
        ndnn.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])

    def test_missing_backward_rule(self):
        leaf = parameter(np.ones(2), np.float64)
        bad = Tensor(np.ones(2), requires_grad=True, parents=(leaf,), backward=None, op="mystery")
        with pytest.raises(RuntimeError, match="mystery"):
            ndnn.backward(ndnn.mse_loss(bad, np.zeros(2)))


class TestForwardDeterminism:
    def test_bitwise_repeatable(self):
        rng = np.random.default_rng(12)
        layer = ndnn.init_conv(rng, 3, 2, 4)
        x = Tensor(rng.normal(size=(8, 8, 2)).astype(np.float32))
        a = ndnn.conv2d(x, layer).data
        b = ndnn.conv2d(x, layer).data
        assert a.tobytes() == b.tobytes()


class TestAdam:
    def test_zero_gradient(self):
        p = parameter(np.array([1.0, -2.0]))
        state = OptimizerState.for_parameters([p])
        ndnn.adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, np.array([1.0, -2.0], np.float32))
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        p = parameter(np.array([0.5]), np.float64)
        state = OptimizerState.for_parameters([p])
        ndnn.adam_step([p], [np.array([1.0])], state)
        assert 0.5 - p.data[0] == pytest.approx(1e-3, abs=1e-6)

    def test_identical_tensors_identical_updates(self):
        rng = np.random.default_rng(13)
        init = rng.normal(size=(3, 3))
        a, b = parameter(init), parameter(init)
        state = OptimizerState.for_parameters([a, b])
        for _ in range(5):
            g = rng.normal(size=(3, 3))
            ndnn.adam_step([a, b], [g, g], state)
        assert a.data.tobytes() == b.data.tobytes()

    def test_accumulator_shapes(self):
        params = [parameter(np.zeros((2, 3))), parameter(np.zeros(4))]
        state = OptimizerState.for_parameters(params)
        assert [m.shape for m in state.first_moment] == [(2, 3), (4,)]
        assert all(m.dtype == np.float64 for m in state.second_moment)

    def test_shape_mismatch(self):
        p = parameter(np.zeros(3))
        state = OptimizerState.for_parameters([p])
        with pytest.raises(ShapeError):
            ndnn.adam_step([p], [np.zeros(4)], state)

    def test_minimizes_quadratic(self):
        p = parameter(np.array([3.0, -2.0]), np.float64)
        state = OptimizerState.for_parameters([p], learning_rate=0.05)
        for _ in range(500):
            ndnn.adam_step([p], [2 * p.data], state)
        assert np.max(np.abs(p.data)) < 1e-2
