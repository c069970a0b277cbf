"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``DTensor`` wraps a numpy array, every
operation records its inputs and a backward closure, and ``backward`` replays
the creation-ordered tape in reverse.  Only first-order gradients are
supported.  32- and 64-bit float buffers are both accepted; an operation's
output dtype follows numpy promotion of its inputs.
"""

import itertools

import numpy as np

from .kernels import col2im, im2col

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand extents do not match an operation's contract."""


class DTensor:
    """A dense array participating in reverse-mode differentiation.

    ``values`` is the element buffer, ``grad`` (same shape, allocated lazily)
    accumulates d(loss)/d(self) after a backward pass.  ``node_id`` orders the
    tensor on the implicit tape; creation order is a topological order of the
    computation graph.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad=False, dtype=None):
        self.values = np.asarray(values, dtype=dtype)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"DTensor(shape={self.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_dtensor(other))

    def __radd__(self, other):
        return add(_as_dtensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_dtensor(other))

    def __rsub__(self, other):
        return sub(_as_dtensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_dtensor(other))

    def __rmul__(self, other):
        return mul(_as_dtensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_dtensor(other))

    def __rtruediv__(self, other):
        return div(_as_dtensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_dtensor(x):
    return x if isinstance(x, DTensor) else DTensor(x)


def _make(values, parents, op, backward_fn):
    out = DTensor(values)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._op = op
    return out


class Tape:
    """Creation-ordered record of the operations reachable from a root.

    Node ids increase monotonically at creation, so sorting the reachable
    subgraph by id yields a topological order; the reversed order is replayed
    exactly once per record during backward.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(node._parents)
        return cls([seen[i] for i in sorted(seen)])

    def run_backward(self):
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward root is not tracked")
    loss.grad = np.ones_like(loss.values)
    Tape.trace(loss).run_backward()


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b):
    a, b = _as_dtensor(a), _as_dtensor(b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        b.accumulate_grad(_unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return _make(a.values + b.values, (a, b), "add", bwd)


def sub(a, b):
    a, b = _as_dtensor(a), _as_dtensor(b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape).astype(a.dtype, copy=False))
        b.accumulate_grad(-_unbroadcast(g, b.shape).astype(b.dtype, copy=False))

    return _make(a.values - b.values, (a, b), "sub", bwd)


def mul(a, b):
    a, b = _as_dtensor(a), _as_dtensor(b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g * b.values, a.shape).astype(a.dtype, copy=False))
        b.accumulate_grad(_unbroadcast(g * a.values, b.shape).astype(b.dtype, copy=False))

    return _make(a.values * b.values, (a, b), "mul", bwd)


def div(a, b):
    a, b = _as_dtensor(a), _as_dtensor(b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g / b.values, a.shape).astype(a.dtype, copy=False))
        b.accumulate_grad(_unbroadcast(-g * a.values / (b.values * b.values), b.shape).astype(b.dtype, copy=False))

    return _make(a.values / b.values, (a, b), "div", bwd)


def neg(a):
    def bwd(g):
        a.accumulate_grad(-g)

    return _make(-a.values, (a,), "neg", bwd)


def relu(a):
    mask = a.values > 0

    def bwd(g):
        a.accumulate_grad(g * mask)

    return _make(a.values * mask, (a,), "relu", bwd)


def exp(a):
    y = np.exp(a.values)

    def bwd(g):
        a.accumulate_grad(g * y)

    return _make(y, (a,), "exp", bwd)


def log(a):
    def bwd(g):
        a.accumulate_grad(g / a.values)

    return _make(np.log(a.values), (a,), "log", bwd)


def pow_base(base, t):
    """base ** t for a fixed positive scalar base and tensor exponent.

    The exponent is clipped to keep the result finite in the buffer dtype;
    beyond the clip the true gradient has long since underflowed.
    """
    if base <= 0:
        raise ValueError("pow_base requires a positive base")
    lnb = np.log(base)
    limit = 80.0 if t.dtype == np.float32 else 700.0
    y = np.exp(np.minimum(t.values * lnb, limit))

    def bwd(g):
        t.accumulate_grad(g * y * lnb)

    return _make(y, (t,), "pow_base", bwd)


def square(a):
    def bwd(g):
        a.accumulate_grad(2.0 * g * a.values)

    return _make(a.values * a.values, (a,), "square", bwd)


def sigmoid_slope(z, slope=1.0):
    """Elementwise 1 / (1 + exp(-slope * z)); output lies in (0, 1).

    Evaluated branch-wise on the argument sign so neither exp overflows.
    """
    x = slope * z.values
    ex = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def bwd(g):
        z.accumulate_grad(g * slope * y * (1.0 - y))

    return _make(y, (z,), "sigmoid", bwd)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes only where the input is strictly inside."""
    inside = (a.values > lo) & (a.values < hi)

    def bwd(g):
        a.accumulate_grad(g * inside)

    return _make(np.clip(a.values, lo, hi), (a,), "clamp", bwd)


def dropout(a, rate, rng, train=True):
    """Inverted-scaling dropout: eval-time output is the identity."""
    if not train or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep

    def bwd(g):
        a.accumulate_grad(g * mask)

    return _make(a.values * mask, (a,), "dropout", bwd)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    y = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(y, (a,), "sum", bwd)


def mean(a, axis=None, keepdims=False):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    def bwd(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(a.values.reshape(shape), (a,), "reshape", bwd)


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes):
    inv = np.argsort(axes)

    def bwd(g):
        a.accumulate_grad(g.transpose(inv))

    return _make(a.values.transpose(axes), (a,), "transpose", bwd)


def concat(tensors, axis=0):
    tensors = [_as_dtensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tensors, "concat", bwd)


def stack(tensors, axis=0):
    tensors = [_as_dtensor(t) for t in tensors]

    def bwd(g):
        for i, t in enumerate(tensors):
            t.accumulate_grad(np.take(g, i, axis=axis))

    return _make(np.stack([t.values for t in tensors], axis=axis), tensors, "stack", bwd)


def weighted_sum(tensors, weights):
    """Sum w_i * t_i over a list of same-shape tensors with scalar weights.

    Weights may be floats or scalar DTensors; the reduction order is the list
    order, which keeps repeated runs bit-identical.
    """
    out = None
    for t, w in zip(tensors, weights):
        term = mul(_as_dtensor(t), _as_dtensor(w))
        out = term if out is None else add(out, term)
    return out


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")

    def bwd(g):
        a.accumulate_grad((g @ b.values.T).astype(a.dtype, copy=False))
        b.accumulate_grad((a.values.T @ g).astype(b.dtype, copy=False))

    return _make(a.values @ b.values, (a, b), "matmul", bwd)


def einsum2(spec, a, b):
    """Two-operand einsum with gradients.

    Each operand's index set must be covered by the output and the other
    operand (no indices summed within a single operand), which holds for
    every contraction this package uses.
    """
    ins, out_sub = spec.split("->")
    s1, s2 = ins.split(",")
    if not (set(s1) <= set(out_sub) | set(s2) and set(s2) <= set(out_sub) | set(s1)):
        raise ValueError(f"unsupported einsum spec {spec!r}")

    def bwd(g):
        a.accumulate_grad(np.einsum(f"{out_sub},{s2}->{s1}", g, b.values, optimize=True).astype(a.dtype, copy=False))
        b.accumulate_grad(np.einsum(f"{out_sub},{s1}->{s2}", g, a.values, optimize=True).astype(b.dtype, copy=False))

    y = np.einsum(spec, a.values, b.values, optimize=True)
    return _make(y, (a, b), f"einsum[{spec}]", bwd)


# ----------------------------------------------------------------------
# spatial ops (NHWC)
# ----------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"filter {kh}x{kw} larger than padded input {h}x{w}")
    return oh, ow, pads


def conv2d(x, f, stride=1, padding="same"):
    """2D cross-correlation: x [n,h,w,c] with filters f [kh,kw,c,fo]."""
    n, h, w, c = x.shape
    kh, kw, fc, fo = f.shape
    if fc != c:
        raise ShapeError(f"conv2d channels: input {c}, filter {fc}")
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.values, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = im2col(xp, kh, kw, stride, oh, ow)  # (n, oh, ow, kh, kw, c)
    cols_flat = cols.reshape(n * oh * ow, kh * kw * c)
    y = (cols_flat @ f.values.reshape(kh * kw * c, fo)).reshape(n, oh, ow, fo)

    def bwd(g):
        g_flat = g.reshape(n * oh * ow, fo)
        f.accumulate_grad((cols_flat.T @ g_flat).reshape(f.shape).astype(f.dtype, copy=False))
        dcols = (g_flat @ f.values.reshape(kh * kw * c, fo).T).reshape(n, oh, ow, kh, kw, c)
        dxp = col2im(dcols, xp.shape, stride)
        x.accumulate_grad(dxp[:, pt:pt + h, pl:pl + w, :].astype(x.dtype, copy=False))

    return _make(y, (x, f), "conv2d", bwd)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; spatial extents must be even."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    r = x.values.reshape(n, h // 2, 2, w // 2, 2, c)
    y = r.max(axis=(2, 4))
    # one-hot argmax mask; ties resolve to the first position for determinism
    flat = r.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = flat.argmax(axis=-1)

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
        x.accumulate_grad(dx)

    return _make(y, (x,), "maxpool2x2", bwd)


def global_avg_pool(x):
    """Mean over the spatial axes of an NHWC tensor -> [n, c]."""
    n, h, w, c = x.shape
    scale = 1.0 / (h * w)
    y = x.values.mean(axis=(1, 2))

    def bwd(g):
        x.accumulate_grad(np.broadcast_to(g[:, None, None, :] * scale, x.shape).astype(x.dtype, copy=False))

    return _make(y, (x,), "gap", bwd)


# ----------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    ``labels`` is an integer array of class indices in [0, C).
    """
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.min() < 0 or labels.max() >= num_classes:
        raise IndexError(f"labels outside [0, {num_classes})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    loss = nll.mean()

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits.accumulate_grad((g * d / n).astype(logits.dtype, copy=False))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "softmax_xent", bwd)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------

def sgd_momentum_step(params, velocities, lr, momentum=0.9):
    """In-place SGD with momentum: v <- m*v + g; p <- p - lr*v.

    ``velocities`` maps id(param) -> buffer and is created lazily. Parameters
    with no accumulated gradient are skipped.
    """
    for p in params:
        if p.grad is None:
            continue
        v = velocities.get(id(p))
        if v is None:
            v = np.zeros_like(p.values)
            velocities[id(p)] = v
        v *= momentum
        v += p.grad
        p.values -= lr * v


def zero_grads(params):
    for p in params:
        p.zero_grad()
