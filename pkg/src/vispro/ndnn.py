"""Small reverse-mode autodiff kernel for the layers the regression network needs.

Activations use NHWC layout. Every op records a closure that maps the output
gradient to input gradients; :func:`backward` replays them in reverse
topological order. Ops preserve the dtype of their inputs, so a float32 model
can be cast to float64 for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {self!r}")


def parameter(array, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


def _node(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None, op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class ConvLayer:
    kernel: Tensor  # k_h x k_w x c_in x c_out
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def weight_count(self) -> int:
        return int(self.kernel.size)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]

    def parameters(self) -> list[Tensor]:
        return [self.kernel, self.bias]


@dataclass
class DenseLayer:
    weights: Tensor  # n_in x n_out
    bias: Tensor

    @property
    def weight_count(self) -> int:
        return int(self.weights.size)

    def parameters(self) -> list[Tensor]:
        return [self.weights, self.bias]


def init_conv(rng: np.random.Generator, k: int, c_in: int, c_out: int, stride: int = 1, padding: int = 0) -> ConvLayer:
    bound = np.sqrt(6.0 / (k * k * c_in))
    kernel = rng.uniform(-bound, bound, size=(k, k, c_in, c_out))
    return ConvLayer(parameter(kernel), parameter(np.zeros(c_out)), stride=stride, padding=padding)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> DenseLayer:
    bound = np.sqrt(6.0 / n_in)
    return DenseLayer(parameter(rng.uniform(-bound, bound, size=(n_in, n_out))), parameter(np.zeros(n_out)))


def _batched(x: Tensor) -> Tensor:
    if x.data.ndim == 3:
        return reshape(x, (1, *x.shape))
    if x.data.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}")
    return x


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    x = _batched(_as_tensor(x))
    kh, kw, c_in, c_out = layer.kernel.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {layer.kernel.shape}")
    s, p = layer.stride, layer.padding
    xd = x.data
    if p:
        xd = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    n, h, w, _ = xd.shape
    if h < kh or w < kw:
        raise ShapeError(f"input shape {x.shape} smaller than kernel {layer.kernel.shape}")
    ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
    w2 = layer.kernel.data.reshape(kh * kw * c_in, c_out)
    if kh == kw == 1 and s == 1:
        cols = xd.reshape(n * h * w, c_in)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c_in)
    out = (cols @ w2 + layer.bias.data).reshape(n, ho, wo, c_out)

    def backward(g):
        g2 = g.reshape(n * ho * wo, c_out)
        dkernel = (cols.T @ g2).reshape(layer.kernel.shape)
        dbias = g2.sum(axis=0)
        dcols = g2 @ w2.T
        if kh == kw == 1 and s == 1:
            dxp = dcols.reshape(n, h, w, c_in)
        else:
            dcols = dcols.reshape(n, ho, wo, kh, kw, c_in)
            dxp = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p : h - p, p : w - p, :] if p else dxp
        return dx, dkernel, dbias

    return _node(out, (x, layer.kernel, layer.bias), backward, "conv2d")


def pool_output_size(dim: int, kernel: int = 3, stride: int = 2, ceil_mode: bool = True) -> int:
    span = dim - kernel
    if ceil_mode:
        out = -(-span // stride) + 1
    else:
        out = span // stride + 1
    return max(out, 1)


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, ceil_mode: bool = True) -> Tensor:
    x = _batched(_as_tensor(x))
    n, h, w, c = x.shape
    ho = pool_output_size(h, kernel, stride, ceil_mode)
    wo = pool_output_size(w, kernel, stride, ceil_mode)
    need_h, need_w = (ho - 1) * stride + kernel, (wo - 1) * stride + kernel
    xd = x.data
    if need_h > h or need_w > w:
        xd = np.pad(xd, ((0, 0), (0, max(need_h - h, 0)), (0, max(need_w - w, 0)), (0, 0)), constant_values=-np.inf)
    win = sliding_window_view(xd, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xd.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = idx == i * kernel + j
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += g * hit
        return (dxp[:, :h, :w, :],)

    return _node(out, (x,), backward, "maxpool2d")


def global_maxpool(x: Tensor) -> Tensor:
    x = _batched(_as_tensor(x))
    n, h, w, c = x.shape
    flat = x.data.reshape(n, h * w, c)
    idx = flat.argmax(axis=1)
    out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(n, 1, 1, c)

    def backward(g):
        dflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(dflat, idx[:, None, :], g.reshape(n, 1, c), axis=1)
        return (dflat.reshape(n, h, w, c),)

    return _node(out, (x,), backward, "global_maxpool")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    positive = x.data >= 0
    out = np.where(positive, x.data, x.data * x.data.dtype.type(slope))

    def backward(g):
        return (np.where(positive, g, g * g.dtype.type(slope)),)

    return _node(out, (x,), backward, "leaky_relu")


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    original = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(original),)

    return _node(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def dense(x: Tensor, layer: DenseLayer) -> Tensor:
    x = _as_tensor(x)
    single = x.data.ndim == 1
    if single:
        x = reshape(x, (1, -1))
    n_in = layer.weights.shape[0]
    if x.data.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"dense layer expects width {n_in}, got input shape {x.shape}")
    xd, wd = x.data, layer.weights.data
    out = xd @ wd + layer.bias.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    y = _node(out, (x, layer.weights, layer.bias), backward, "dense")
    return reshape(y, (-1,)) if single else y


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - target
    out = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return _node(out, (pred,), backward, "mse")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            raise RuntimeError(f"no backward rule recorded for op {node.op!r}")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            grads[id(parent)] = pg if id(parent) not in grads else grads[id(parent)] + pg


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.second_moment = [np.zeros(p.shape, dtype=np.float64) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> OptimizerState:
    """Apply one bias-corrected Adam update in place; returns the state."""
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"gradient/accumulator shape mismatch for parameter {p.shape}")
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    return state


def numerical_gradient(loss_fn: Callable[[], float], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of ``loss_fn`` w.r.t. every entry of ``param``."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn())
        flat[i] = orig - step
        down = float(loss_fn())
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
