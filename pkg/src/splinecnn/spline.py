"""Clamped-uniform B-spline bases and spline banks over weight tensors.

A bank holds K knot tensors of one shape plus a degree d; evaluating it at a
position in [0, 1] returns a convex combination of at most d+1 knots, with
gradients flowing both to the active knots and to the position.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTensor


def knot_vector(num_knots, degree):
    """Clamped (open) uniform knot vector on [0, 1] for K control points."""
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    if num_knots < degree + 1:
        raise ValueError(f"need K >= d+1 knots, got K={num_knots}, d={degree}")
    interior = np.linspace(0.0, 1.0, num_knots - degree + 1)
    return np.concatenate([np.zeros(degree), interior, np.ones(degree)])


def _find_spans(phi, kv, num_knots, degree):
    spans = np.searchsorted(kv, phi, side="right") - 1
    return np.clip(spans, degree, num_knots - 1)


def _basis_nonzero(phi, spans, kv, degree):
    """The d+1 nonzero basis values at each phi (Cox-de Boor triangle)."""
    n = phi.shape[0]
    vals = np.zeros((n, degree + 1), dtype=phi.dtype)
    vals[:, 0] = 1.0
    left = np.empty((n, degree + 1), dtype=phi.dtype)
    right = np.empty((n, degree + 1), dtype=phi.dtype)
    for j in range(1, degree + 1):
        left[:, j] = phi - kv[spans + 1 - j]
        right[:, j] = kv[spans + j] - phi
        saved = np.zeros(n, dtype=phi.dtype)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.where(denom != 0.0, vals[:, r] / np.where(denom == 0.0, 1.0, denom), 0.0)
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals


def basis_matrix(phi, num_knots, degree):
    """Dense basis values and derivatives for a batch of positions.

    Returns (B, dB) of shape (n, K): B[i, k] = B_k(phi_i), dB its derivative
    in phi.  Positions must lie in [0, 1]; phi = 1 resolves to the right
    endpoint (B_K = 1).
    """
    phi = np.asarray(phi, dtype=np.float64) if np.asarray(phi).dtype.kind != "f" else np.asarray(phi)
    if phi.ndim != 1:
        raise ValueError("basis_matrix expects a flat array of positions")
    if phi.size and (phi.min() < 0.0 or phi.max() > 1.0):
        raise ValueError("positions must lie in [0, 1]")
    kv = knot_vector(num_knots, degree).astype(phi.dtype)
    spans = _find_spans(phi, kv, num_knots, degree)
    n = phi.shape[0]
    rows = np.arange(n)[:, None]
    cols = spans[:, None] - degree + np.arange(degree + 1)[None, :]

    basis = np.zeros((n, num_knots), dtype=phi.dtype)
    basis[rows, cols] = _basis_nonzero(phi, spans, kv, degree)

    # derivative: B'_{k,d} = d * (B_{k,d-1}/(t_{k+d}-t_k) - B_{k+1,d-1}/(t_{k+d+1}-t_{k+1}))
    num_lower = num_knots + 1  # count of degree d-1 functions on the same knot vector
    lower = np.zeros((n, num_lower), dtype=phi.dtype)
    if degree == 1:
        lower[rows, spans[:, None]] = 1.0
    else:
        lcols = spans[:, None] - (degree - 1) + np.arange(degree)[None, :]
        lower[rows, lcols] = _basis_nonzero(phi, spans, kv, degree - 1)
    k = np.arange(num_knots)
    d1 = kv[k + degree] - kv[k]
    d2 = kv[k + degree + 1] - kv[k + 1]
    left_term = np.where(d1 != 0.0, lower[:, :num_knots] / np.where(d1 == 0.0, 1.0, d1), 0.0)
    right_term = np.where(d2 != 0.0, lower[:, 1:num_knots + 1] / np.where(d2 == 0.0, 1.0, d2), 0.0)
    dbasis = degree * (left_term - right_term)
    return basis, dbasis


@dataclass
class BasisWeights:
    """Basis values at one position: K coefficients, <= d+1 of them nonzero."""

    coeffs: np.ndarray
    start: int  # index of the first knot in the active window

    @property
    def active(self):
        return self.coeffs[self.start:self.start + np.count_nonzero(self.coeffs) or None]


def basis_eval(phi, num_knots, degree):
    """Basis values for a single scalar position in [0, 1]."""
    basis, _ = basis_matrix(np.asarray([phi], dtype=np.float64), num_knots, degree)
    coeffs = basis[0]
    nz = np.nonzero(coeffs)[0]
    return BasisWeights(coeffs=coeffs, start=int(nz[0]) if nz.size else 0)


class SplineBank:
    """K same-shape knot tensors plus a degree, evaluable at positions in [0,1].

    Knots are stored stacked as one tracked DTensor of shape (K, *knot_shape)
    so a single gradient buffer covers the whole bank.
    """

    def __init__(self, knots, degree):
        if isinstance(knots, DTensor):
            self.knots = knots
        else:
            self.knots = DTensor(np.stack([np.asarray(k) for k in knots]), requires_grad=True)
        self.degree = int(degree)
        if self.num_knots < self.degree + 1:
            raise ValueError(f"need K >= d+1, got K={self.num_knots}, d={self.degree}")

    @property
    def num_knots(self):
        return self.knots.shape[0]

    @property
    def knot_shape(self):
        return self.knots.shape[1:]


def basis_op(phi, num_knots, degree):
    """Differentiable basis evaluation: DTensor [..., ] -> DTensor [..., K].

    The derivative matrix is saved at forward time; backward contracts it with
    the incoming gradient to produce d(loss)/d(phi).
    """
    flat = phi.values.reshape(-1)
    basis, dbasis = basis_matrix(flat, num_knots, degree)
    out_shape = phi.shape + (num_knots,)

    def bwd(g):
        g2 = g.reshape(-1, num_knots)
        phi.accumulate_grad((g2 * dbasis).sum(axis=1).reshape(phi.shape).astype(phi.dtype, copy=False))

    return T._make(basis.reshape(out_shape).astype(phi.dtype, copy=False), (phi,), "bspline_basis", bwd)


def spline_eval(bank, phi):
    """S(phi) = sum_k C_k B_k(phi) for a scalar position DTensor."""
    if phi.size != 1:
        raise ValueError("spline_eval takes a scalar position; use spline_eval_batch")
    basis = basis_op(T.reshape(phi, (1,)), bank.num_knots, bank.degree)  # [1, K]
    flat = T.reshape(bank.knots, (bank.num_knots, -1))
    out = T.einsum2("nk,kw->nw", basis, flat)
    return T.reshape(out, bank.knot_shape)


def spline_eval_batch(bank, phi):
    """Vectorized S(phi_n) over a batch of scalar positions -> [n, *knot_shape]."""
    basis = basis_op(phi, bank.num_knots, bank.degree)  # [n, K]
    flat = T.reshape(bank.knots, (bank.num_knots, -1))
    out = T.einsum2("nk,kw->nw", basis, flat)
    return T.reshape(out, phi.shape + bank.knot_shape)


def spline_eval_vector(banks, phi):
    """Per-bank evaluation of f banks at f positions, stacked on a new last axis.

    ``phi`` is a DTensor of f scalar positions; all banks must share one knot
    shape.  Equivalent to looping spline_eval and stacking.
    """
    if len(banks) != phi.size:
        raise ValueError(f"{len(banks)} banks but {phi.size} positions")
    shapes = {b.knot_shape for b in banks}
    if len(shapes) > 1:
        raise ValueError(f"banks disagree on knot shape: {shapes}")
    flat = T.reshape(phi, (-1,))
    parts = [spline_eval(bank, take(flat, j)) for j, bank in enumerate(banks)]
    return T.stack(parts, axis=-1)


def take(a, i):
    """Select element/row i along the first axis of a DTensor."""

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[i] = g
        a.accumulate_grad(full)

    return T._make(a.values[i], (a,), "take", bwd)
