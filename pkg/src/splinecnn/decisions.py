"""Projections from feature maps to spline positions, and position dynamics.

A projection maps features to positions in (0, 1) through a sloped sigmoid;
positions inherited from the previous layer are blended with fresh
projections by a per-layer diffusion coefficient, after an optional learned
size-matching map when the position widths differ.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTensor

POSITION_CLAMP = 1e-6  # keeps matched positions inside the open interval (0, 1)


@dataclass
class PositionState:
    """Per-sample spline positions flowing layer to layer.

    ``positions`` has shape [batch] (scalar position per sample) or
    [batch, f] (one position per filter); every element lies in (0, 1).
    """

    positions: DTensor
    layer: int = 0

    @property
    def width(self):
        return 1 if self.positions.ndim == 1 else self.positions.shape[1]


@dataclass
class DecisionParams:
    """Parameters of one projection.

    ``kind`` is "dot" (matrix of shape [f, M] applied to flattened features)
    or "conv" (a 1x1 filter of shape [1, 1, c, f] followed by global
    averaging); ``slope`` is the multiplicative factor inside the sigmoid.
    """

    kind: str
    params: DTensor
    slope: float = 0.4

    def __post_init__(self):
        if self.kind not in ("dot", "conv"):
            raise ValueError(f"decision kind must be 'dot' or 'conv', got {self.kind!r}")

    @property
    def width(self):
        return self.params.shape[0] if self.kind == "dot" else self.params.shape[3]


def project_dot(x, theta):
    """sigmoid(slope * theta @ x_n) for flattened features x [batch, M] -> [batch, f]."""
    if x.ndim != 2:
        raise T.ShapeError(f"project_dot expects flattened features, got {x.shape}")
    if theta.params.shape[1] != x.shape[1]:
        raise T.ShapeError(f"decision matrix {theta.params.shape} vs features {x.shape}")
    z = T.matmul(x, T.transpose(theta.params, (1, 0)))
    return T.sigmoid_slope(z, theta.slope)


def project_conv(x, theta):
    """1x1 convolution, global spatial average, sloped sigmoid -> [batch, f]."""
    if x.ndim != 4:
        raise T.ShapeError(f"project_conv expects NHWC features, got {x.shape}")
    z = T.global_avg_pool(T.conv2d(x, theta.params, stride=1, padding="valid"))
    return T.sigmoid_slope(z, theta.slope)


def project_dot_per_sample(x, theta_batch, slope):
    """Dot projection with a separate decision matrix per sample.

    ``theta_batch`` [batch, f, M] is typically generated from a decision
    spline; equivalent to looping project_dot with each sample's matrix.
    """
    z = T.einsum2("nfm,nm->nf", theta_batch, x)
    return T.sigmoid_slope(z, slope)


def project_conv_per_sample(x, theta_batch, slope):
    """Conv projection with a separate 1x1 filter per sample.

    ``theta_batch`` [batch, c, f].  The 1x1 convolution and the global
    average commute (both linear), so the average is taken first.
    """
    xa = T.global_avg_pool(x)  # [batch, c]
    z = T.einsum2("ncf,nc->nf", theta_batch, xa)
    return T.sigmoid_slope(z, slope)


def diffuse(phi_prev, p_new, delta):
    """phi_next = (1 - delta) * phi_prev + delta * p_new, elementwise."""
    if phi_prev.positions.shape != p_new.shape:
        raise T.ShapeError(
            f"diffuse shapes {phi_prev.positions.shape} vs {p_new.shape}; match_positions first")
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"diffusion coefficient must lie in [0, 1], got {delta}")
    mixed = T.add(T.mul(phi_prev.positions, 1.0 - delta), T.mul(p_new, delta))
    return PositionState(positions=mixed, layer=phi_prev.layer + 1)


@dataclass
class DiffusionSchedule:
    """Per-layer diffusion coefficients.

    kind "constant": delta_i = alpha for every layer.
    kind "tree": delta_i = b ** (1 - i), emulating a b-ary decision tree.
    """

    kind: str = "constant"
    alpha: float = 1.0
    branching: int = 2

    def __post_init__(self):
        if self.kind not in ("constant", "tree"):
            raise ValueError(f"schedule kind must be 'constant' or 'tree', got {self.kind!r}")
        if self.kind == "constant" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.kind == "tree" and self.branching < 2:
            raise ValueError(f"tree schedule needs branching >= 2, got {self.branching}")

    def delta(self, layer):
        if layer < 1:
            raise ValueError(f"layer index starts at 1, got {layer}")
        if self.kind == "constant":
            return self.alpha
        return float(self.branching) ** (1 - layer)


def match_positions(phi_prev, mmat):
    """Map positions [batch, f_prev] through a learned matrix to [batch, f].

    The affine image can leave (0, 1), so the result is clamped to
    [POSITION_CLAMP, 1 - POSITION_CLAMP] to stay inside the basis domain.
    """
    out = T.matmul(phi_prev, mmat)
    return T.clamp(out, POSITION_CLAMP, 1.0 - POSITION_CLAMP)


def init_match_matrix(f_prev, f_new, dtype=np.float32):
    """Averaging initialization: outputs start at the mean of the inputs."""
    return DTensor(np.full((f_prev, f_new), 1.0 / f_prev, dtype=dtype), requires_grad=True)
