"""Exact parameter and FLOP accounting for built models.

Conventions (also embedded in every report): one multiply-accumulate is 2
FLOPs, a sigmoid or exp is 4, relu and pooling cost 1 per output element,
and a basis evaluation of degree d costs 2*d*(d+1) FLOPs per position.
Single-sample mode counts the sparse inference path, which touches only the
d+1 active knots of each spline regardless of the knot count K;
batch-amortized mode counts the training path that convolves with all K
knots stacked and mixes the partitions afterwards.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import SplineConvLayer, SplineDenseLayer
from .models import INPUT_SHAPE, PlainConvLayer

CONVENTIONS = {
    "mac_flops": 2,
    "sigmoid_flops": 4,
    "relu_pool_flops_per_element": 1,
    "basis_eval_flops": "2*d*(d+1) per position",
}


@dataclass
class CostReport:
    mode: str
    rows: list = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def add(self, name, params, flops, memory_bytes):
        self.rows.append({"name": name, "params": int(params), "flops": int(flops),
                          "memory_bytes": int(memory_bytes)})

    @property
    def total_params(self):
        return sum(r["params"] for r in self.rows)

    @property
    def total_flops(self):
        return sum(r["flops"] for r in self.rows)

    @property
    def total_memory(self):
        return sum(r["memory_bytes"] for r in self.rows)

    def to_dict(self):
        return {
            "mode": self.mode,
            "conventions": self.conventions,
            "rows": self.rows,
            "totals": {"params": self.total_params, "flops": self.total_flops,
                       "memory_bytes": self.total_memory},
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self):
        header = f"{'layer':<12}{'params':>12}{'flops':>14}{'bytes':>12}"
        lines = [f"mode: {self.mode}", header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['name']:<12}{r['params']:>12}{r['flops']:>14}{r['memory_bytes']:>12}")
        lines.append("-" * len(header))
        lines.append(f"{'total':<12}{self.total_params:>12}{self.total_flops:>14}{self.total_memory:>12}")
        return "\n".join(lines)


def _layer_params(layer):
    return sum(p.size for p in layer.parameters())


def _layer_memory(layer):
    return sum(p.size * p.values.itemsize for p in layer.parameters())


def count_params(model):
    """Exact per-layer parameter counts."""
    report = CostReport(mode="params")
    for name, layer in model.layers:
        report.add(name, _layer_params(layer), 0, _layer_memory(layer))
    return report


def _basis_flops(degree, positions=1):
    return 2 * degree * (degree + 1) * positions


def conv_only_flops(model):
    """Transform-convolution FLOPs alone (no decisions, generation, or bias).

    Comparable to the instrumented counter in ``instrumented_conv_flops``.
    """
    total = 0
    h, w, c = INPUT_SHAPE
    for _, layer in model.layers:
        if isinstance(layer, (PlainConvLayer, SplineConvLayer)):
            if isinstance(layer, PlainConvLayer):
                kh, kw, _, f = layer.weights.shape
            else:
                kh = kw = layer.kernel
                f = layer.filters
            total += 2 * h * w * kh * kw * c * f
            h, w, c = h // 2, w // 2, f
    return total


def instrumented_conv_flops(model, x_n=None):
    """Run single-sample inference with a MAC counter on the conv kernel."""
    from . import layers

    if x_n is None:
        x_n = np.zeros(INPUT_SHAPE, dtype=np.float32)
    layers.conv_mac_counter["enabled"] = True
    layers.conv_mac_counter["macs"] = 0
    try:
        model.forward_single(x_n)
    finally:
        layers.conv_mac_counter["enabled"] = False
    return 2 * layers.conv_mac_counter["macs"]


def count_flops(model, mode="single-sample"):
    """Exact per-layer FLOP counts for one sample's inference."""
    if mode not in ("single-sample", "batch-amortized"):
        raise ValueError(f"unknown mode {mode!r}")
    report = CostReport(mode=mode)
    h, w, c = INPUT_SHAPE
    f_prev = None
    for name, layer in model.layers:
        flops = 0
        if isinstance(layer, PlainConvLayer):
            kh, kw, _, f = layer.weights.shape
            flops += 2 * h * w * kh * kw * c * f + h * w * f  # conv + bias
            flops += h * w * f  # relu
            h, w, c = h // 2, w // 2, f
            flops += h * w * f  # pool
        elif isinstance(layer, SplineConvLayer):
            cfg = layer.cfg
            f = layer.filters
            fp = layer.width
            m = h * w * c
            kh = kw = layer.kernel
            d = cfg.degree
            if layer.theta_bank is not None:  # hierarchical decision generation
                theta_size = fp * m if cfg.decision == "dot" else c * fp
                flops += _basis_flops(layer.theta_bank.degree) + 2 * (d + 1) * theta_size
            if cfg.decision == "dot":
                flops += 2 * fp * m + 4 * fp
            else:
                flops += 2 * h * w * c * fp + h * w * fp + fp + 4 * fp  # 1x1 conv, avg, sigmoid
            if layer.match_matrix is not None:
                flops += 2 * layer.match_matrix.shape[0] * fp + fp
            flops += 3 * fp  # diffusion blend
            knot_size = kh * kw * c * f + f
            if mode == "single-sample":
                flops += _basis_flops(d, fp) + 2 * (d + 1) * knot_size
                flops += 2 * h * w * kh * kw * c * f + h * w * f
            else:
                k = cfg.num_knots
                flops += _basis_flops(d, fp)
                flops += 2 * h * w * kh * kw * c * k * f  # stacked-knot convolution
                flops += 2 * h * w * f * k + 2 * (d + 1) * f  # partition mixing + bias
            flops += h * w * f  # relu
            h, w, c = h // 2, w // 2, f
            flops += h * w * f  # pool
        elif isinstance(layer, SplineDenseLayer):
            cfg = layer.cfg
            m, n = layer.in_dim, layer.out_dim
            d = cfg.degree
            if layer.theta_bank is not None:
                flops += _basis_flops(layer.theta_bank.degree) + 2 * (d + 1) * m
            flops += 2 * m + 4  # dot projection + sigmoid
            if layer.match_matrix is not None:
                flops += 2 * layer.match_matrix.shape[0] + 1
            flops += 3
            if mode == "single-sample":
                flops += _basis_flops(d) + 2 * (d + 1) * (m + 1) * n
                flops += 2 * (m + 1) * n
            else:
                flops += _basis_flops(d)
                flops += 2 * (m + 1) * n * cfg.num_knots + 2 * n * cfg.num_knots
            flops += n  # relu
            h = w = None
        else:  # plain dense (baseline dense1 or the classifier head)
            m, n = layer.weights.shape
            flops += 2 * m * n + n
            if name == "dense1":
                flops += n  # relu
            h = w = None
        report.add(name, _layer_params(layer), flops, _layer_memory(layer))
    return report
