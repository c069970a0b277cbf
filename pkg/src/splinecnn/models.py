"""Model builders: baseline LeNet-s and its spline-conditioned variants.

LeNet-s is conv5x5(s)-relu-pool, conv5x5(2s)-relu-pool, dense(4s)-relu-
dropout(0.5), dense(10).  The spline variant replaces both convolutions and
the first dense layer with spline layers and threads a per-sample position
state through them; the 10-way head stays plain.  Variants are named
M(K)-T-R: M in {D, H} (dynamic/hierarchical), T in {D, C} (dot/conv
decisions), R in {R3, R4} (knot rank).
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decisions import DiffusionSchedule
from .layers import SplineConvLayer, SplineDenseLayer, SplineLayerConfig, eval_single
from .tensor import DTensor

INPUT_SHAPE = (28, 28, 1)
NUM_CLASSES = 10
DROPOUT_RATE = 0.5
INIT_VARIANCE_SCALE = 0.05
# MNIST pixel statistics; inputs are standardized at the model boundary so
# the batched, single-sample, and eval paths all see the same scale.
INPUT_MEAN = 0.1307
INPUT_STD = 0.3081


def _init(shape, fan_in, rng, dtype):
    return DTensor(rng.normal(0.0, np.sqrt(INIT_VARIANCE_SCALE / fan_in), size=shape).astype(dtype),
                   requires_grad=True)


class PlainConvLayer:
    def __init__(self, in_channels, filters, kernel=5, rng=None, dtype=np.float32):
        self.weights = _init((kernel, kernel, in_channels, filters),
                             kernel * kernel * in_channels, rng, dtype)
        self.bias = DTensor(np.zeros(filters, dtype=dtype), requires_grad=True)

    def forward(self, x):
        y = T.conv2d(x, self.weights, stride=1, padding="same")
        return T.add(y, T.reshape(self.bias, (1, 1, 1, -1)))

    def parameters(self):
        return [self.weights, self.bias]


class PlainDenseLayer:
    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32):
        self.weights = _init((in_dim, out_dim), in_dim, rng, dtype)
        self.bias = DTensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.add(T.matmul(x, self.weights), T.reshape(self.bias, (1, -1)))

    def parameters(self):
        return [self.weights, self.bias]


@dataclass
class ModelSpec:
    """Build recipe: family, width scale, and the spline configuration."""

    family: str  # 'lenet' | 'spline-lenet'
    scale: int
    layer_config: SplineLayerConfig | None = None
    schedule: DiffusionSchedule | None = None
    dropout: float = DROPOUT_RATE
    normalize: bool = True  # standardize inputs with the MNIST pixel stats

    @property
    def name(self):
        if self.family == "lenet":
            return f"LeNet-{self.scale}"
        cfg = self.layer_config
        m = "H" if cfg.model == "hierarchical" else "D"
        t = "D" if cfg.decision == "dot" else "C"
        return f"Spline-LeNet-{self.scale} {m}({cfg.num_knots})-{t}-R{cfg.rank}"


class Model:
    """A built network: ordered named layers plus forward passes."""

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = layers  # list of (name, layer)
        h, w, c = INPUT_SHAPE
        self.dense_in = (h // 4) * (w // 4) * 2 * spec.scale

    def named_parameters(self):
        out = {}
        for name, layer in self.layers:
            params = layer.parameters()
            labels = _param_labels(layer, len(params))
            for label, p in zip(labels, params):
                out[f"{name}.{label}"] = p
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def forward(self, x, train=False, rng=None):
        """Batched pass -> (logits [n, 10], position states per spline layer)."""
        if not isinstance(x, DTensor):
            x = DTensor(x)
        if self.spec.normalize:
            x = T.mul(T.sub(x, INPUT_MEAN), 1.0 / INPUT_STD)
        states = []
        pos = None
        spec = self.spec
        layer_index = 0
        for name, layer in self.layers:
            if isinstance(layer, SplineConvLayer):
                layer_index += 1
                out = layer.forward(x, pos, spec.schedule.delta(layer_index))
                x, pos = out.features, out.positions
                states.append(pos)
                x = T.maxpool2x2(T.relu(x))
            elif isinstance(layer, SplineDenseLayer):
                layer_index += 1
                x = T.flatten(x)
                out = layer.forward(x, pos, spec.schedule.delta(layer_index))
                x, pos = out.features, out.positions
                states.append(pos)
                x = T.relu(x)
                x = T.dropout(x, spec.dropout, rng, train=train)
            elif isinstance(layer, PlainConvLayer):
                x = T.maxpool2x2(T.relu(layer.forward(x)))
            elif name == "dense1":
                x = T.relu(layer.forward(T.flatten(x)))
                x = T.dropout(x, spec.dropout, rng, train=train)
            else:  # head
                x = layer.forward(x if x.ndim == 2 else T.flatten(x))
        return x, states

    def forward_single(self, x_n):
        """Sparse single-sample inference -> (logits [10], positions, knots touched)."""
        spec = self.spec
        phi = None
        touched = 0
        positions = []
        layer_index = 0
        x = np.asarray(x_n)
        if spec.normalize:
            x = (x - INPUT_MEAN) / INPUT_STD
        for name, layer in self.layers:
            if isinstance(layer, (SplineConvLayer, SplineDenseLayer)):
                layer_index += 1
                if isinstance(layer, SplineDenseLayer):
                    x = x.reshape(-1)
                x, phi, k = eval_single(layer, x, phi, spec.schedule.delta(layer_index))
                touched += k
                positions.append(phi)
                x = np.maximum(x, 0.0)
                if isinstance(layer, SplineConvLayer):
                    x = _pool_single(x)
            elif isinstance(layer, PlainConvLayer):
                x = _conv_plain_single(x, layer.weights.values, layer.bias.values)
                x = _pool_single(np.maximum(x, 0.0))
            elif name == "dense1":
                x = np.maximum(x.reshape(-1) @ layer.weights.values + layer.bias.values, 0.0)
            else:
                x = x.reshape(-1) @ layer.weights.values + layer.bias.values
        return x, positions, touched


def _param_labels(layer, count):
    if isinstance(layer, (PlainConvLayer, PlainDenseLayer)):
        return ["weights", "bias"]
    labels = []
    if isinstance(layer, SplineConvLayer):
        labels += ["knots", "bias_knots"]
    else:
        labels += ["knots"]
    if layer.decision is not None:
        labels.append("theta")
    if layer.theta_bank is not None:
        labels.append("theta_knots")
    if layer.match_matrix is not None:
        labels.append("match")
    return labels[:count] if len(labels) >= count else labels + [f"p{i}" for i in range(count - len(labels))]


def _pool_single(x):
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def _conv_plain_single(x, w, b):
    from .layers import _conv_single

    return _conv_single(x, w) + b


def build_lenet(scale, rng=None, dtype=np.float32):
    """Baseline LeNet-s on 28x28x1 inputs."""
    if scale < 1:
        raise ValueError(f"width scale must be >= 1, got {scale}")
    rng = rng or np.random.default_rng(0)
    spec = ModelSpec(family="lenet", scale=scale, schedule=DiffusionSchedule())
    h, w, c = INPUT_SHAPE
    dense_in = (h // 4) * (w // 4) * 2 * scale
    layers = [
        ("conv1", PlainConvLayer(c, scale, rng=rng, dtype=dtype)),
        ("conv2", PlainConvLayer(scale, 2 * scale, rng=rng, dtype=dtype)),
        ("dense1", PlainDenseLayer(dense_in, 4 * scale, rng=rng, dtype=dtype)),
        ("head", PlainDenseLayer(4 * scale, NUM_CLASSES, rng=rng, dtype=dtype)),
    ]
    return Model(spec, layers)


def build_spline_lenet(scale, num_knots=2, model="hierarchical", decision="dot", rank=3,
                       degree=None, schedule=None, theta_knots=None, slope=0.4,
                       rng=None, dtype=np.float32):
    """Spline-conditioned LeNet-s: both convolutions and dense1 on splines.

    ``degree`` defaults to cubic, lowered to K-1 when the knot count cannot
    support it (the basis needs K >= d+1).
    """
    if scale < 1:
        raise ValueError(f"width scale must be >= 1, got {scale}")
    if degree is None:
        degree = min(3, num_knots - 1, (theta_knots or num_knots) - 1)
    rng = rng or np.random.default_rng(0)
    cfg = SplineLayerConfig(model=model, decision=decision, rank=rank,
                            num_knots=num_knots, theta_knots=theta_knots or num_knots,
                            degree=degree, slope=slope)
    schedule = schedule or DiffusionSchedule(kind="constant", alpha=1.0)
    spec = ModelSpec(family="spline-lenet", scale=scale, layer_config=cfg, schedule=schedule)
    h, w, c = INPUT_SHAPE
    dense_in = (h // 4) * (w // 4) * 2 * scale
    dense_cfg = dataclasses.replace(cfg, rank=4, decision="dot")
    conv1 = SplineConvLayer(cfg, (h, w, c), scale, rng=rng, dtype=dtype, first=True)
    conv2 = SplineConvLayer(cfg, (h // 2, w // 2, scale), 2 * scale, rng=rng, dtype=dtype)
    dense1 = SplineDenseLayer(dense_cfg, dense_in, 4 * scale, rng=rng, dtype=dtype)
    conv2.ensure_match(conv1.width, dtype=dtype)
    dense1.ensure_match(conv2.width, dtype=dtype)
    layers = [
        ("conv1", conv1),
        ("conv2", conv2),
        ("dense1", dense1),
        ("head", PlainDenseLayer(4 * scale, NUM_CLASSES, rng=rng, dtype=dtype)),
    ]
    return Model(spec, layers)


def make_degenerate(model):
    """Collapse every spline bank to identical knots (copies of knot 0).

    With identical knots the spline is constant in the position, so the model
    must reproduce a plain CNN with those weights.
    """
    for _, layer in model.layers:
        if isinstance(layer, (SplineConvLayer, SplineDenseLayer)):
            layer.weight_bank.knots.values[:] = layer.weight_bank.knots.values[0]
            if hasattr(layer, "bias_knots"):
                layer.bias_knots.values[:] = layer.bias_knots.values[0]
    return model
