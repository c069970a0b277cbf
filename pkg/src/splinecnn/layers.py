"""Conditional layers whose weights live on B-spline banks.

Each layer projects its input features to a position in (0, 1) (per sample,
optionally per filter), blends it with the inherited position via diffusion,
evaluates its weight bank at the result, and applies the dense or
convolutional transform.  During batched training the convolution is applied
once with all knots stacked into a single filter bank and the per-sample
basis weighting is taken afterwards; linearity of convolution makes the two
orders identical.  Single-sample inference uses the sparse path that touches
only the d+1 active knots.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decisions import (
    DecisionParams,
    PositionState,
    diffuse,
    init_match_matrix,
    match_positions,
    project_conv,
    project_conv_per_sample,
    project_dot,
    project_dot_per_sample,
)
from .spline import SplineBank, basis_eval, basis_matrix, basis_op
from .tensor import DTensor


@dataclass
class SplineLayerConfig:
    """Static configuration of one spline layer."""

    model: str = "hierarchical"  # 'dynamic' | 'hierarchical'
    decision: str = "dot"  # 'dot' | 'conv'
    rank: int = 4  # 3: one spline per filter; 4: one spline for the bank
    num_knots: int = 4  # K for the weight bank
    theta_knots: int = 4  # K for the decision bank (hierarchical layers >= 2)
    degree: int = 3
    slope: float = 0.4

    def __post_init__(self):
        if self.model not in ("dynamic", "hierarchical"):
            raise ValueError(f"model must be 'dynamic' or 'hierarchical', got {self.model!r}")
        if self.decision not in ("dot", "conv"):
            raise ValueError(f"decision must be 'dot' or 'conv', got {self.decision!r}")
        if self.rank not in (3, 4):
            raise ValueError(f"knot rank must be 3 or 4, got {self.rank}")
        for k in (self.num_knots, self.theta_knots):
            if k < self.degree + 1:
                raise ValueError(f"need K >= d+1 knots, got K={k}, d={self.degree}")


@dataclass
class LayerOutput:
    features: DTensor
    positions: PositionState


def gen_decision_params(theta_bank, pos_prev):
    """Per-sample decision parameters from the decision spline.

    Hierarchical layers index their decision bank with the previous layer's
    position; a vector position is summarized by its mean.  Returns a DTensor
    [batch, *theta_shape].
    """
    if theta_bank is None:
        raise RuntimeError("decision bank requested on a dynamic layer")
    pos = pos_prev.positions
    if pos.ndim == 2 and pos.shape[1] > 1:
        pos = T.mean(pos, axis=1)
    else:
        pos = T.reshape(pos, (pos.shape[0],))
    basis = basis_op(pos, theta_bank.num_knots, theta_bank.degree)  # [n, K]
    flat = T.reshape(theta_bank.knots, (theta_bank.num_knots, -1))
    theta = T.einsum2("nk,kw->nw", basis, flat)
    return T.reshape(theta, (pos.shape[0],) + theta_bank.knot_shape)


def batched_knot_conv(x, weight_knots, basis):
    """Convolution with all knots stacked into one filter bank, then the
    per-sample weighted sum over the K channel partitions.

    ``weight_knots`` [K, kh, kw, c, f]; ``basis`` is [n, K] (rank-4, one
    position per sample) or [n, f, K] (rank-3, one position per filter).
    Identical to convolving each sample with its own generated filter bank.
    """
    num_knots, kh, kw, c, f = weight_knots.shape
    big = T.reshape(T.transpose(weight_knots, (1, 2, 3, 0, 4)), (kh, kw, c, num_knots * f))
    y_all = T.conv2d(x, big, stride=1, padding="same")
    n, oh, ow, _ = y_all.shape
    y_all = T.reshape(y_all, (n, oh, ow, num_knots, f))
    if basis.ndim == 2:
        return T.einsum2("nhwkf,nk->nhwf", y_all, basis)
    if basis.ndim == 3:
        return T.einsum2("nhwkf,nfk->nhwf", y_all, basis)
    raise T.ShapeError(f"basis must be [n,K] or [n,f,K], got {basis.shape}")


class _SplineLayerBase:
    """Shared decision/diffusion plumbing for dense and conv spline layers."""

    def __init__(self, cfg, feat_dim, channels, width, first, rng, dtype):
        self.cfg = cfg
        self.width = width  # f: number of positions emitted per sample
        self.first = first
        self.match_matrix = None  # set by the model builder when widths differ
        self.theta_bank = None
        self.decision = None
        if cfg.model == "dynamic" or first:
            self.decision = DecisionParams(
                kind=cfg.decision,
                params=_init_theta(cfg, feat_dim, channels, width, rng, dtype),
                slope=cfg.slope,
            )
        else:
            shape = (cfg.theta_knots, width, feat_dim) if cfg.decision == "dot" \
                else (cfg.theta_knots, channels, width)
            fan_in = feat_dim if cfg.decision == "dot" else channels
            self.theta_bank = SplineBank(
                _init_knots(shape, fan_in, rng, dtype), degree=cfg.degree)

    def _project(self, x, x_flat, pos_prev):
        """Fresh projection p in (0,1)^[n,f] from the current features."""
        if self.decision is not None:
            if self.cfg.decision == "dot":
                return project_dot(x_flat, self.decision)
            return project_conv(x, self.decision)
        theta = gen_decision_params(self.theta_bank, pos_prev)
        if self.cfg.decision == "dot":
            return project_dot_per_sample(x_flat, theta, self.cfg.slope)
        return project_conv_per_sample(x, theta, self.cfg.slope)

    def ensure_match(self, f_prev, dtype=np.float32):
        """Create the learned position size-matching matrix if needed."""
        if f_prev != self.width and self.match_matrix is None:
            self.match_matrix = init_match_matrix(f_prev, self.width, dtype=dtype)

    def _positions(self, x, x_flat, pos_prev, delta):
        p_new = self._project(x, x_flat, pos_prev)
        if pos_prev is None:
            return PositionState(positions=p_new, layer=1)
        inherited = pos_prev.positions
        if inherited.shape[1] != self.width:
            self.ensure_match(inherited.shape[1], dtype=inherited.dtype)
            inherited = match_positions(inherited, self.match_matrix)
        return diffuse(PositionState(inherited, pos_prev.layer), p_new, delta)

    def parameters(self):
        params = []
        if self.decision is not None:
            params.append(self.decision.params)
        if self.theta_bank is not None:
            params.append(self.theta_bank.knots)
        if self.match_matrix is not None:
            params.append(self.match_matrix)
        return params


def _init_theta(cfg, feat_dim, channels, width, rng, dtype):
    if cfg.decision == "dot":
        shape, fan_in = (width, feat_dim), feat_dim
    else:
        shape, fan_in = (1, 1, channels, width), channels
    return DTensor(_init_knots(shape, fan_in, rng, dtype), requires_grad=True)


def _init_knots(shape, fan_in, rng, dtype, variance_scale=0.05):
    """Normal init with variance c / fan_in of the constructed weight shape."""
    return rng.normal(0.0, np.sqrt(variance_scale / fan_in), size=shape).astype(dtype)


class SplineConvLayer(_SplineLayerBase):
    """Spline-parameterized 2D convolution (SAME padding, stride 1).

    rank-4: a single bank with knots [K, kh, kw, c, f] indexed by one scalar
    position per sample.  rank-3: f per-filter banks, stored stacked with the
    filter axis last, indexed by a vector position.  Each knot carries its
    own bias vector so biases live on the spline as well.
    """

    def __init__(self, cfg, in_shape, filters, kernel=5, rng=None, dtype=np.float32, first=False):
        h, w, c = in_shape
        width = filters if cfg.rank == 3 else 1
        super().__init__(cfg, feat_dim=h * w * c, channels=c, width=width,
                         first=first, rng=rng, dtype=dtype)
        self.filters = filters
        self.kernel = kernel
        self.in_shape = in_shape
        fan_in = kernel * kernel * c
        self.weight_bank = SplineBank(
            _init_knots((cfg.num_knots, kernel, kernel, c, filters), fan_in, rng, dtype),
            degree=cfg.degree)
        self.bias_knots = DTensor(np.zeros((cfg.num_knots, filters), dtype=dtype),
                                  requires_grad=True)

    def parameters(self):
        return [self.weight_bank.knots, self.bias_knots] + super().parameters()

    def _basis(self, state):
        pos = state.positions
        if self.cfg.rank == 4:
            flat = T.reshape(pos, (pos.shape[0],))
            return basis_op(flat, self.cfg.num_knots, self.cfg.degree)  # [n, K]
        return basis_op(pos, self.cfg.num_knots, self.cfg.degree)  # [n, f, K]

    def forward(self, x, pos_prev, delta):
        x_flat = T.flatten(x)
        state = self._positions(x, x_flat, pos_prev, delta)
        basis = self._basis(state)
        y = batched_knot_conv(x, self.weight_bank.knots, basis)
        if basis.ndim == 2:
            bias = T.einsum2("nk,kf->nf", basis, self.bias_knots)
        else:
            bias = T.einsum2("nfk,kf->nf", basis, self.bias_knots)
        y = T.add(y, T.reshape(bias, (x.shape[0], 1, 1, self.filters)))
        return LayerOutput(features=y, positions=state)

    def forward_per_sample(self, x, pos_prev, delta):
        """Reference path: generate each sample's filter bank, then convolve.

        Same semantics as ``forward``; used by the path-equivalence tests and
        by single-sample evaluation.
        """
        x_flat = T.flatten(x)
        state = self._positions(x, x_flat, pos_prev, delta)
        basis = self._basis(state)
        knots_flat = T.reshape(self.weight_bank.knots, (self.cfg.num_knots, -1))
        kh = kw = self.kernel
        c = self.in_shape[2]
        if basis.ndim == 2:
            w = T.reshape(T.einsum2("nk,kw->nw", basis, knots_flat),
                          (x.shape[0], kh, kw, c, self.filters))
            bias = T.einsum2("nk,kf->nf", basis, self.bias_knots)
        else:
            per_filter = T.transpose(self.weight_bank.knots, (4, 0, 1, 2, 3))  # [f,K,kh,kw,c]
            w = T.transpose(T.einsum2("nfk,fkhwc->nfhwc", basis, per_filter),
                            (0, 2, 3, 4, 1))  # [n,kh,kw,c,f]
            bias = T.einsum2("nfk,kf->nf", basis, self.bias_knots)
        outs = []
        for i in range(x.shape[0]):
            xi = _slice_batch(x, i)
            wi = T.reshape(_slice_batch(w, i), w.shape[1:])
            outs.append(T.conv2d(xi, wi, stride=1, padding="same"))
        y = T.concat(outs, axis=0)
        y = T.add(y, T.reshape(bias, (x.shape[0], 1, 1, self.filters)))
        return LayerOutput(features=y, positions=state)


class SplineDenseLayer(_SplineLayerBase):
    """Spline-parameterized dense layer with one scalar position per sample.

    Knots have shape [K, M_in + 1, M_out]; the extra row is the bias, applied
    by augmenting the input with a constant one.
    """

    def __init__(self, cfg, in_dim, out_dim, rng=None, dtype=np.float32, first=False):
        if cfg.rank == 3:
            raise ValueError("rank-3 (per-filter) knots are defined for conv layers only")
        super().__init__(cfg, feat_dim=in_dim, channels=0, width=1,
                         first=first, rng=rng, dtype=dtype)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight_bank = SplineBank(
            _init_knots((cfg.num_knots, in_dim + 1, out_dim), in_dim, rng, dtype),
            degree=cfg.degree)

    def parameters(self):
        return [self.weight_bank.knots] + super().parameters()

    def forward(self, x, pos_prev, delta):
        state = self._positions(x, x, pos_prev, delta)
        flat = T.reshape(state.positions, (x.shape[0],))
        basis = basis_op(flat, self.cfg.num_knots, self.cfg.degree)  # [n, K]
        x_aug = T.concat([x, DTensor(np.ones((x.shape[0], 1), dtype=x.dtype))], axis=1)
        # y_n = x_n @ S(phi_n): contract with each knot first, then mix
        z = T.einsum2("ni,kio->nko", x_aug, self.weight_bank.knots)
        y = T.einsum2("nk,nko->no", basis, z)
        return LayerOutput(features=y, positions=state)

    def forward_per_sample(self, x, pos_prev, delta):
        """Reference path: evaluate each sample's weight matrix explicitly."""
        state = self._positions(x, x, pos_prev, delta)
        flat = T.reshape(state.positions, (x.shape[0],))
        basis = basis_op(flat, self.cfg.num_knots, self.cfg.degree)
        knots_flat = T.reshape(self.weight_bank.knots, (self.cfg.num_knots, -1))
        w = T.reshape(T.einsum2("nk,kw->nw", basis, knots_flat),
                      (x.shape[0], self.in_dim + 1, self.out_dim))
        x_aug = T.concat([x, DTensor(np.ones((x.shape[0], 1), dtype=x.dtype))], axis=1)
        y = T.einsum2("ni,nio->no", x_aug, w)
        return LayerOutput(features=y, positions=state)


def _slice_batch(x, i):
    """Keep-dims selection of batch element i."""

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[i] = g[0]
        x.accumulate_grad(full)

    return T._make(x.values[i:i + 1], (x,), "slice_batch", bwd)


def eval_single(layer, x_n, phi_prev, delta):
    """Sparse single-sample inference through one conv/dense spline layer.

    Pure numpy, forward only: evaluates the decision, the diffusion step and
    the weight spline touching only the d+1 active knots per spline.
    ``x_n`` is one sample without the batch axis; ``phi_prev`` is None or a
    numpy vector of inherited positions.  Returns (y_n, phi_new, knots_touched).
    """
    cfg = layer.cfg
    x_flat = x_n.reshape(-1)
    if layer.decision is not None:
        theta = layer.decision.params.values
    else:
        prev_scalar = float(np.mean(phi_prev))
        bw = basis_eval(prev_scalar, layer.theta_bank.num_knots, layer.theta_bank.degree)
        active = slice(bw.start, bw.start + cfg.degree + 1)
        theta = np.tensordot(bw.coeffs[active], layer.theta_bank.knots.values[active], axes=1)
    if cfg.decision == "dot" or isinstance(layer, SplineDenseLayer):
        z = theta.reshape(layer.width, -1) @ x_flat
    else:  # 1x1 conv then global average == channel-mean projection (both linear)
        z = x_n.mean(axis=(0, 1)) @ theta.reshape(-1, layer.width)
    p_new = 1.0 / (1.0 + np.exp(-cfg.slope * np.asarray(z, dtype=np.float64)))
    p_new = p_new.reshape(layer.width)
    if phi_prev is None:
        phi = p_new
    else:
        inherited = np.asarray(phi_prev, dtype=np.float64)
        if inherited.shape[0] != layer.width:
            inherited = np.clip(inherited @ layer.match_matrix.values, 1e-6, 1.0 - 1e-6)
        phi = (1.0 - delta) * inherited + delta * p_new
    # sparse weight generation: only the active window of knots
    if isinstance(layer, SplineDenseLayer):
        bw = basis_eval(float(phi[0]), cfg.num_knots, cfg.degree)
        active = slice(bw.start, bw.start + cfg.degree + 1)
        w = np.tensordot(bw.coeffs[active], layer.weight_bank.knots.values[active], axes=1)
        y = np.append(x_flat, 1.0) @ w
        return y, phi, cfg.degree + 1
    if cfg.rank == 4:
        bw = basis_eval(float(phi[0]), cfg.num_knots, cfg.degree)
        active = slice(bw.start, bw.start + cfg.degree + 1)
        w = np.tensordot(bw.coeffs[active], layer.weight_bank.knots.values[active], axes=1)
        b = bw.coeffs[active] @ layer.bias_knots.values[active]
        touched = cfg.degree + 1
    else:
        b_mat, _ = basis_matrix(phi, cfg.num_knots, cfg.degree)  # [f, K]
        w = np.einsum("fk,khwcf->hwcf", b_mat, layer.weight_bank.knots.values)
        b = np.einsum("fk,kf->f", b_mat, layer.bias_knots.values)
        touched = (cfg.degree + 1) * layer.width
    y = _conv_single(x_n, w.astype(x_n.dtype, copy=False)) + b.astype(x_n.dtype, copy=False)
    return y, phi, touched


conv_mac_counter = {"enabled": False, "macs": 0}


def _conv_single(x_n, w):
    """SAME-padded stride-1 convolution of one sample, plain numpy."""
    h, wd, c = x_n.shape
    kh, kw, _, f = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x_n, ((pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)))
    out = np.zeros((h, wd, f), dtype=x_n.dtype)
    wf = w.reshape(-1, f)
    count = conv_mac_counter["enabled"]
    for i in range(h):
        for j in range(wd):
            patch = xp[i:i + kh, j:j + kw, :].reshape(-1)
            out[i, j] = patch @ wf
            if count:
                conv_mac_counter["macs"] += patch.size * f
    return out
