"""Mutual-information regularization of spline positions.

Positions are soft-quantized into B bins with a differentiable membership
function, giving per-batch histograms whose entropy (utilization) is
maximized and whose label-conditional entropy (specialization) is minimized.
All entropies are in nats.

The soft membership used here is U = (1 + v^(z^2 - 1))^-1 with
z = 2(phi - c_b)/w_b: approximately 1 inside the bin, exactly 0.5 on the bin
edges, and approximately 0 outside.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTensor


@dataclass
class Quantizer:
    """B equal bins tiling [0, 1] with soft membership slope v > 1."""

    bins: int = 50
    slope: float = 100.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"need at least 2 bins, got {self.bins}")
        if self.slope <= 1.0:
            raise ValueError(f"quantization slope must exceed 1, got {self.slope}")

    @property
    def centers(self):
        return (np.arange(self.bins) + 0.5) / self.bins

    @property
    def width(self):
        return 1.0 / self.bins


def soft_bin(phi, b, q):
    """Soft membership of each position in bin b -> DTensor like phi.

    (1 + v^(z^2-1))^-1 is evaluated as sigmoid(ln(v) * (1 - z^2)), which
    cannot overflow for positions far outside the bin.
    """
    center = q.centers[b]
    z = T.mul(T.sub(phi, center), 2.0 / q.width)
    return T.sigmoid_slope(T.sub(1.0, T.square(z)), np.log(q.slope))


def soft_bin_matrix(phi, q):
    """Soft memberships of N positions in all B bins -> DTensor [N, B]."""
    if phi.ndim != 1:
        raise ValueError("soft_bin_matrix expects a flat vector of positions")
    centered = T.sub(T.reshape(phi, (phi.shape[0], 1)), DTensor(q.centers.astype(phi.dtype)))
    z = T.mul(centered, 2.0 / q.width)
    return T.sigmoid_slope(T.sub(1.0, T.square(z)), np.log(q.slope))


def bin_probs(phi, q):
    """Normalized soft histogram: Pr(bin b) = sum_n U_nb / sum_n sum_b U_nb."""
    memberships = soft_bin_matrix(phi, q)
    per_bin = T.sum_(memberships, axis=0)
    return T.div(per_bin, T.sum_(per_bin))


def entropy(p, eps=1e-8):
    """-sum p log(p + eps), natural log."""
    return T.neg(T.sum_(T.mul(p, T.log(T.add(p, eps)))))


def cond_bin_probs(phi, labels, q):
    """Per-class soft histograms, normalized within class.

    Classes absent from the batch are skipped.  Returns (cond [Cp, B],
    priors [Cp], class ids [Cp]); priors are batch class frequencies.
    """
    labels = np.asarray(labels)
    if labels.shape[0] != phi.shape[0]:
        raise ValueError(f"{phi.shape[0]} positions vs {labels.shape[0]} labels")
    memberships = soft_bin_matrix(phi, q)
    classes, counts = np.unique(labels, return_counts=True)
    rows = []
    for c in classes:
        mask = DTensor((labels == c).astype(phi.dtype).reshape(-1, 1))
        per_bin = T.sum_(T.mul(memberships, mask), axis=0)
        rows.append(T.div(per_bin, T.sum_(per_bin)))
    cond = T.stack(rows, axis=0)
    priors = counts / labels.shape[0]
    return cond, priors, classes


def cond_entropy(cond, priors, eps=1e-8):
    """H(bin | class) = -sum_c Pr(c) sum_b p_cb log(p_cb + eps)."""
    per_class = T.neg(T.sum_(T.mul(cond, T.log(T.add(cond, eps))), axis=1))
    return T.sum_(T.mul(per_class, DTensor(np.asarray(priors, dtype=per_class.dtype))))


def mixture_marginal(cond, priors):
    """Marginal bin probabilities as the prior-weighted class mixture.

    Using this consistent joint (rather than re-normalizing the raw
    histogram) makes H(bin) - H(bin|class) an exact mutual information.
    """
    pr = T.reshape(DTensor(np.asarray(priors, dtype=cond.dtype)), (1, len(priors)))
    return T.reshape(T.matmul(pr, cond), (cond.shape[1],))


@dataclass
class RegConfig:
    """Weights of the utilization (w_u) and specialization (w_s) terms."""

    w_u: float = 0.2
    w_s: float = 0.2

    def __post_init__(self):
        if self.w_u < 0 or self.w_s < 0:
            raise ValueError("regularizer weights must be nonnegative")


def reg_loss(position_states, labels, q, cfg):
    """Total position regularizer: sum over layers of -w_u H + w_s H_cond.

    ``position_states`` is a list of PositionState; per-filter position
    components are pooled into the layer's histogram as independent samples.
    Returns (loss, per-layer marginal entropies as floats).
    """
    entropies = []
    if not position_states:
        return DTensor(0.0), entropies
    if cfg.w_u == 0.0 and cfg.w_s == 0.0:
        for state in position_states:
            flat = state.positions.values.reshape(-1)
            p = bin_probs(DTensor(flat), q)
            entropies.append(float(entropy(p, q.eps).values))
        return DTensor(0.0), entropies
    loss = None
    for state in position_states:
        pos = state.positions
        f = 1 if pos.ndim == 1 else pos.shape[1]
        flat = T.reshape(pos, (-1,))
        if labels is None:
            h_marg = entropy(bin_probs(flat, q), q.eps)
            term = T.mul(h_marg, -cfg.w_u)
        else:
            rep = np.repeat(np.asarray(labels), f)
            cond, priors, _ = cond_bin_probs(flat, rep, q)
            h_marg = entropy(mixture_marginal(cond, priors), q.eps)
            h_cond = cond_entropy(cond, priors, q.eps)
            term = T.add(T.mul(h_marg, -cfg.w_u), T.mul(h_cond, cfg.w_s))
        entropies.append(float(h_marg.values))
        loss = term if loss is None else T.add(loss, term)
    return loss, entropies
