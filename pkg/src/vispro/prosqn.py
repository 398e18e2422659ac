"""SqueezeNet-style RUL regressor with a time input injected after the image head.

Layer sequence (full width)::

    Conv1 6x6/2 x32 -> Pool -> Fire2 -> Fire3 -> Pool -> Fire4 -> Fire5 -> Pool
    -> Fire6 -> Fire7 -> Fire8 -> Fire9 -> Conv10 1x1 x1024 -> GlobalPool
    -> Den1 (1024->4) -> [concat t / T_ref] -> Den2 (5->100) -> Den3 (100->30) -> Den4 (30->1)

Pools are 3x3, stride 2, ceil mode. Biases exist everywhere but are left out
of weight counts.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndnn
from .errors import AuditError, InputError, ShapeError, TrainingError
from .ndnn import ConvLayer, DenseLayer, Tensor
from .tfa import StftConfig, TfaImage, VibrationSnapshot, stft, tfa_normalize

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 4
INPUT_SHAPE = (64, 64, 1)


@dataclass(frozen=True)
class FireSpec:
    squeeze: int
    expand1x1: int
    expand3x3: int

    def __post_init__(self):
        if min(self.squeeze, self.expand1x1, self.expand3x3) < 1:
            raise InputError(f"fire filter counts must be positive: {self}")

    @property
    def out_channels(self) -> int:
        return self.expand1x1 + self.expand3x3

    def scaled(self, divisor: int) -> "FireSpec":
        return FireSpec(self.squeeze // divisor, self.expand1x1 // divisor, self.expand3x3 // divisor)


@dataclass
class FireModule:
    spec: FireSpec
    squeeze: ConvLayer
    expand1x1: ConvLayer
    expand3x3: ConvLayer

    @property
    def weight_count(self) -> int:
        return self.squeeze.weight_count + self.expand1x1.weight_count + self.expand3x3.weight_count

    def parameters(self) -> list[Tensor]:
        return self.squeeze.parameters() + self.expand1x1.parameters() + self.expand3x3.parameters()


class MaxPool:
    weight_count = 0

    def parameters(self):
        return []


class GlobalMaxPool(MaxPool):
    pass


FIRE_SPECS = {
    "Fire2": FireSpec(16, 32, 32),
    "Fire3": FireSpec(16, 64, 64),
    "Fire4": FireSpec(32, 128, 128),
    "Fire5": FireSpec(32, 128, 128),
    "Fire6": FireSpec(48, 192, 192),
    "Fire7": FireSpec(48, 192, 192),
    "Fire8": FireSpec(64, 256, 256),
    "Fire9": FireSpec(64, 256, 256),
}
DENSE_WIDTHS = {"Den1": 4, "Den2": 100, "Den3": 30, "Den4": 1}
LAYER_ORDER = (
    "Conv1", "Pool1", "Fire2", "Fire3", "Pool2", "Fire4", "Fire5", "Pool3",
    "Fire6", "Fire7", "Fire8", "Fire9", "Conv10", "GlobalPool",
    "Den1", "Den2", "Den3", "Den4",
)

# (layer, output shape, activation bytes per image, weights) from the reference design.
REFERENCE_TABLE = (
    ("Input", (64, 64, 1), 16_384, 0),
    ("Conv1", (30, 30, 32), 115_200, 1_152),
    ("Pool1", (15, 15, 32), 28_800, 0),
    ("Fire2", (15, 15, 64), 72_000, 5_632),
    ("Fire3", (15, 15, 128), 129_600, 11_264),
    ("Pool2", (7, 7, 128), 25_088, 0),
    ("Fire4", (7, 7, 256), 56_448, 45_056),
    ("Fire5", (7, 7, 256), 56_448, 49_152),
    ("Pool3", (3, 3, 256), 9_216, 0),
    ("Fire6", (3, 3, 384), 15_552, 104_448),
    ("Fire7", (3, 3, 384), 15_552, 110_592),
    ("Fire8", (3, 3, 512), 20_736, 188_416),
    ("Fire9", (3, 3, 512), 20_736, 196_608),
    ("Conv10", (3, 3, 1024), 36_864, 524_288),
    ("GlobalPool", (1, 1, 1024), 4_096, 0),
    ("Den1", (1, 1, 4), 16, 4_096),
    ("Den2", (1, 1, 100), 400, 500),
    ("Den3", (1, 1, 30), 120, 3_000),
    ("Den4", (1, 1, 1), 4, 30),
)
REFERENCE_TOTAL_BYTES = 623_260
REFERENCE_TOTAL_WEIGHTS = 1_244_234


@dataclass
class ProSqnModel:
    layers: dict
    width_divisor: int = 1
    t_ref: float = 1.0
    rul_scale: float = 1.0
    slope: float = 0.01

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for name, layer in self.layers.items():
            if isinstance(layer, ConvLayer):
                named += [(f"{name}.kernel", layer.kernel), (f"{name}.bias", layer.bias)]
            elif isinstance(layer, DenseLayer):
                named += [(f"{name}.weights", layer.weights), (f"{name}.bias", layer.bias)]
            elif isinstance(layer, FireModule):
                for part in ("squeeze", "expand1x1", "expand3x3"):
                    conv = getattr(layer, part)
                    named += [(f"{name}.{part}.kernel", conv.kernel), (f"{name}.{part}.bias", conv.bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def weight_count(self) -> int:
        return sum(layer.weight_count for layer in self.layers.values())

    def astype(self, dtype) -> "ProSqnModel":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
        return clone

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def build_prosqn(seed: int = 0, width_divisor: int = 1, t_ref: float = 1.0, rul_scale: float = 1.0) -> ProSqnModel:
    """Fresh model with He-uniform weights and zero biases.

    ``width_divisor`` divides every convolutional channel count (the dense head
    is unchanged), giving a cheaper network with the same topology.
    """
    rng = np.random.default_rng(seed)
    d = width_divisor
    if d < 1 or 16 % d:
        raise InputError(f"width_divisor must divide 16, got {d}")
    layers: dict = {}
    channels = 1
    for name in LAYER_ORDER:
        if name == "Conv1":
            layers[name] = ndnn.init_conv(rng, 6, channels, 32 // d, stride=2)
            channels = 32 // d
        elif name.startswith("Pool"):
            layers[name] = MaxPool()
        elif name.startswith("Fire"):
            spec = FIRE_SPECS[name].scaled(d)
            layers[name] = FireModule(
                spec,
                ndnn.init_conv(rng, 1, channels, spec.squeeze),
                ndnn.init_conv(rng, 1, spec.squeeze, spec.expand1x1),
                ndnn.init_conv(rng, 3, spec.squeeze, spec.expand3x3, padding=1),
            )
            channels = spec.out_channels
        elif name == "Conv10":
            layers[name] = ndnn.init_conv(rng, 1, channels, 1024 // d)
            channels = 1024 // d
        elif name == "GlobalPool":
            layers[name] = GlobalMaxPool()
        else:
            n_in = channels + 1 if name == "Den2" else channels
            layers[name] = ndnn.init_dense(rng, n_in, DENSE_WIDTHS[name])
            channels = DENSE_WIDTHS[name]
    return ProSqnModel(
        layers,
        width_divisor=d,
        t_ref=float(np.float32(t_ref)),
        rul_scale=float(np.float32(rul_scale)),
        slope=float(np.float32(0.01)),
    )


def fire_forward(x: Tensor, fire: FireModule, slope: float = 0.01, trace: list | None = None) -> Tensor:
    x = ndnn._batched(ndnn._as_tensor(x))
    if x.shape[-1] != fire.squeeze.in_channels:
        raise ShapeError(f"fire squeeze expects {fire.squeeze.in_channels} channels, got input shape {x.shape}")
    s = ndnn.leaky_relu(ndnn.conv2d(x, fire.squeeze), slope)
    e1 = ndnn.leaky_relu(ndnn.conv2d(s, fire.expand1x1), slope)
    e3 = ndnn.leaky_relu(ndnn.conv2d(s, fire.expand3x3), slope)
    if trace is not None:
        trace.append(sum(t.data[0].size for t in (s, e1, e3)))
    return ndnn.concat([e1, e3], axis=-1)


def forward_batch(model: ProSqnModel, images, times_normalized, trace: list | None = None) -> Tensor:
    """Raw network output (normalized RUL), shape N x 1.

    ``images`` is N x 64 x 64 (or N x 64 x 64 x 1); ``times_normalized`` is t / T_ref.
    When ``trace`` is a list, (layer, per-image output shape, activation values)
    rows are appended to it.
    """
    dtype = model.layers["Conv1"].kernel.data.dtype
    images = np.asarray(images, dtype=dtype)
    if images.ndim == 3:
        images = images[..., None]
    if trace is not None:
        trace.append(("Input", images.shape[1:], images[0].size))
    return run_layers(model, Tensor(images), times_normalized, trace=trace)


def run_layers(model: ProSqnModel, x: Tensor, times_normalized, start: str = "Conv1", trace: list | None = None) -> Tensor:
    """Run the layer chain from ``start`` onward on activation ``x``."""
    names = list(model.layers)
    n = x.shape[0]
    times = np.asarray(times_normalized, dtype=x.data.dtype).reshape(n, 1)
    slope = model.slope
    for name in names[names.index(start):]:
        layer = model.layers[name]
        inner: list = []
        if isinstance(layer, GlobalMaxPool):
            x = ndnn.flatten(ndnn.global_maxpool(x))
        elif isinstance(layer, MaxPool):
            x = ndnn.maxpool2d(x, 3, 2, ceil_mode=True)
        elif isinstance(layer, FireModule):
            x = fire_forward(x, layer, slope, trace=inner)
        elif isinstance(layer, ConvLayer):
            x = ndnn.leaky_relu(ndnn.conv2d(x, layer), slope)
        else:
            if name == "Den2":
                x = ndnn.concat([x, Tensor(times)], axis=-1)
            x = ndnn.dense(x, layer)
            if name != "Den4":
                x = ndnn.leaky_relu(x, slope)
        if trace is not None:
            shape = x.shape[1:] if x.data.ndim == 4 else (1, 1, x.shape[1])
            values = inner[0] if inner else int(np.prod(shape))
            trace.append((name, tuple(int(v) for v in shape), values))
    return x


def _check_image(values: np.ndarray):
    if values.shape[-2:] != (64, 64):
        raise InputError(f"expected 64x64 image, got {values.shape}")
    if values.size and (values.min() < -1e-6 or values.max() > 1 + 1e-6):
        raise InputError("image is not normalized to [0, 1]; apply tfa_normalize first")


def forward(model: ProSqnModel, image, t: float) -> float:
    """RUL estimate in seconds for one normalized image taken at time ``t``."""
    values = np.asarray(image.values if isinstance(image, TfaImage) else image)
    _check_image(values)
    if t < 0:
        raise InputError(f"time must be nonnegative, got {t}")
    out = forward_batch(model, values[None], [t / model.t_ref])
    return float(out.data[0, 0]) * model.rul_scale


@dataclass(frozen=True)
class AuditRow:
    layer: str
    output_shape: tuple[int, int, int]
    memory_bytes: int
    weights: int


@dataclass
class AuditReport:
    rows: list[AuditRow]

    @property
    def total_bytes(self) -> int:
        return sum(r.memory_bytes for r in self.rows)

    @property
    def total_weights(self) -> int:
        return sum(r.weights for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,output_shape,memory_bytes,weights"]
        for r in self.rows:
            lines.append(f"{r.layer},{'x'.join(map(str, r.output_shape))},{r.memory_bytes},{r.weights}")
        lines.append(f"Overall,,{self.total_bytes},{self.total_weights}")
        return "\n".join(lines) + "\n"


def audit_architecture(model: ProSqnModel, reference=REFERENCE_TABLE) -> AuditReport:
    """Per-layer shapes, activation bytes and weight counts from a probe pass.

    Full-width models are compared row by row against ``reference``; pass
    ``reference=None`` to only build the report.
    """
    trace: list = []
    forward_batch(model, np.zeros((1, *INPUT_SHAPE), dtype=np.float32), [0.0], trace=trace)
    rows = []
    for name, shape, values in trace:
        layer = model.layers.get(name)
        weights = 0 if layer is None else layer.weight_count
        rows.append(AuditRow(name, shape, values * BYTES_PER_VALUE, weights))
    report = AuditReport(rows)
    if reference is None or model.width_divisor != 1:
        return report
    if len(reference) != len(rows):
        raise AuditError(f"model has {len(rows)} audited layers, reference has {len(reference)}")
    for row, (name, shape, memory, weights) in zip(rows, reference):
        if (row.layer, row.output_shape, row.memory_bytes, row.weights) != (name, shape, memory, weights):
            raise AuditError(f"layer {name}: got {row}, expected shape={shape} memory={memory} weights={weights}")
    if report.total_bytes != REFERENCE_TOTAL_BYTES or report.total_weights != REFERENCE_TOTAL_WEIGHTS:
        raise AuditError(f"totals {report.total_bytes} B / {report.total_weights} weights do not match reference")
    return report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    # None: derive from the training set (longest lifetime).
    rul_scale: float | None = None
    time_scale: float | None = None
    final_lr_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise InputError(f"invalid training configuration {self}")
        for v in (self.rul_scale, self.time_scale):
            if v is not None and not v > 0:
                raise InputError("rul_scale and time_scale must be positive")


@dataclass
class LabeledDataset:
    """Normalized images with their snapshot times and true RUL, both in seconds."""

    images: np.ndarray
    times: np.ndarray
    rul: np.ndarray
    lifetimes: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    @classmethod
    def concatenate(cls, parts: list["LabeledDataset"]) -> "LabeledDataset":
        return cls(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.times for p in parts]),
            np.concatenate([p.rul for p in parts]),
            [t for p in parts for t in p.lifetimes],
        )


def compute_gradients(model: ProSqnModel, images, times_normalized, targets_normalized) -> tuple[float, list[np.ndarray]]:
    model.zero_grad()
    pred = forward_batch(model, images, times_normalized)
    loss = ndnn.mse_loss(pred, targets_normalized)
    ndnn.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
    return float(loss.data), grads


def train(model: ProSqnModel, dataset: LabeledDataset, config: TrainConfig = TrainConfig()) -> tuple[ProSqnModel, list[float]]:
    """Minibatch Adam on MSE of normalized RUL; mutates and returns ``model``.

    The learning rate follows a cosine decay to ``final_lr_fraction`` of its
    initial value. Returns the per-epoch mean loss history.
    """
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    _check_image(dataset.images)
    longest = max(dataset.lifetimes) if dataset.lifetimes else float(np.max(dataset.times + dataset.rul))
    model.t_ref = float(np.float32(config.time_scale or longest))
    model.rul_scale = float(np.float32(config.rul_scale or model.t_ref))
    times = dataset.times / model.t_ref
    targets = dataset.rul / model.rul_scale

    params = model.parameters()
    state = ndnn.OptimizerState.for_parameters(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    history = []
    for epoch in range(config.epochs):
        progress = epoch / max(config.epochs - 1, 1)
        frac = config.final_lr_fraction + (1 - config.final_lr_fraction) * 0.5 * (1 + np.cos(np.pi * progress))
        state.learning_rate = config.learning_rate * frac
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = compute_gradients(model, dataset.images[idx], times[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            ndnn.adam_step(params, grads, state)
            total += loss * len(idx)
        history.append(total / n)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return model, history


def predict_images(model: ProSqnModel, images, times, batch_size: int = 64) -> np.ndarray:
    """Batched RUL estimates (seconds) for normalized images."""
    images = np.asarray(images)
    times = np.asarray(times, dtype=np.float64)
    if len(times) == 0:
        return np.zeros(0)
    _check_image(images)
    out = []
    for start in range(0, len(times), batch_size):
        sl = slice(start, start + batch_size)
        out.append(forward_batch(model, images[sl], times[sl] / model.t_ref).data[:, 0].astype(np.float64))
    return np.concatenate(out) * model.rul_scale


def predict_trajectory(model: ProSqnModel, snapshots: list[VibrationSnapshot], config: StftConfig = StftConfig()) -> np.ndarray:
    """Phase-I trajectory: rows of (t_i, RUL_i) for time-ordered snapshots."""
    if not snapshots:
        return np.zeros((0, 2))
    times = np.array([s.timestamp for s in snapshots], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise InputError("snapshots must be strictly increasing in time")
    images = np.stack([tfa_normalize(stft(s, config)).values for s in snapshots])
    return np.column_stack([times, predict_images(model, images, times)])
