"""Reverse-mode automatic differentiation on numpy buffers.

Tensors wrap numpy arrays of rank <= 3. Every op assigns its output a
monotonically increasing serial number, so the set of nodes reachable from
a loss, sorted by serial, reproduces exact tape append order; backward()
walks that order reversed and visits each node exactly once. Gradients
accumulate by summation, and leaves that never participate in a loss keep
a zero gradient rather than a missing one.

Default element type is float32; wrap code in ``precision("float64")`` for
the high-accuracy mode used by finite-difference tests. Every op checks
its output for non-finite values and raises :class:`AutodiffError` naming
the op, so a NaN is caught where it is produced, not steps later.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "tensor",
    "precision",
    "default_dtype",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat",
    "narrow",
    "tanh",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "softplus",
    "clip",
    "minimum",
    "causal_softmax_last",
    "dropout",
    "sum_all",
    "mean_all",
    "sum_last",
    "mean_last",
    "mse",
    "bce_with_logits",
    "layer_norm",
]


class AutodiffError(RuntimeError):
    """Raised when an op produces non-finite values or is misused."""


_DTYPE = np.float32
_SERIAL = itertools.count()
_MAX_RANK = 3


def default_dtype():
    """Current default element type (float32 unless inside precision())."""
    return _DTYPE


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default element type ("float32"/"float64")."""
    global _DTYPE
    chosen = {"float32": np.float32, "float64": np.float64}[name]
    prior = _DTYPE
    _DTYPE = chosen
    try:
        yield
    finally:
        _DTYPE = prior


def _checked(out, op_name):
    if not np.all(np.isfinite(out)):
        raise AutodiffError(f"op '{op_name}' produced non-finite values")
    return out


class Tensor:
    """A node in the computation tape.

    Leaves are created with :func:`tensor`; interior nodes are produced by
    ops. ``grad`` is lazily allocated by backward() and accumulates across
    calls until :func:`zero_grads` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_serial")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.ndim > _MAX_RANK:
            raise AutodiffError(f"rank {arr.ndim} exceeds supported maximum {_MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self._serial = next(_SERIAL)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def detach(self):
        """A constant view of this node's values, severed from the tape."""
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    """Create a leaf tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def _node(op_name, data, parents, vjp):
    needs = any(p.requires_grad for p in parents)
    out = Tensor(_checked(data, op_name), requires_grad=needs, _parents=parents if needs else (), _vjp=vjp if needs else None)
    return out


def _unbroadcast(g, shape):
    # Sum the upstream gradient back down to a broadcast operand's shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op_name, a, b, fwd, da, db):
    data = fwd(a.data, b.data)
    if data.ndim > _MAX_RANK:
        raise AutodiffError(f"op '{op_name}' output rank {data.ndim} exceeds {_MAX_RANK}")

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(g), b.data.shape))

    return _node(op_name, data, (a, b), vjp)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    return _binary("div", a, b, np.divide, lambda g: g / b.data, lambda g: -g * a.data / (b.data * b.data))


def neg(a):
    def vjp(g):
        a._accumulate(-g)

    return _node("neg", -a.data, (a,), vjp)


def scale(a, c):
    """Multiply by a python scalar (kept off the tape)."""
    c = float(c)

    def vjp(g):
        a._accumulate(g * c)

    return _node("scale", a.data * c, (a,), vjp)


def shift(a, c):
    """Add a python scalar (kept off the tape)."""
    c = float(c)

    def vjp(g):
        a._accumulate(g)

    return _node("shift", a.data + c, (a,), vjp)


def matmul(a, b):
    """Matrix product, 2D x 2D, 3D x 2D, or batched 3D x 3D.

    The 3D x 2D case (a per-position projection) is evaluated by
    flattening the leading axes to a single 2D product: the row-wise
    result then never depends on how many positions the batch holds,
    which the exact-prefix property of the transformer relies on.
    """
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise AutodiffError("matmul expects rank-2 or rank-3 operands")
    if a.data.ndim == 3 and b.data.ndim == 2:
        lead = a.data.shape[:2]
        data = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(lead + (b.data.shape[-1],))

        def vjp_proj(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.data.shape[-1]).T @ g2)

        return _node("matmul", data, (a, b), vjp_proj)
    data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node("matmul", data, (a, b), vjp)


def transpose_last2(a):
    def vjp(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _node("transpose_last2", np.swapaxes(a.data, -1, -2), (a,), vjp)


def reshape(a, shape):
    shape = tuple(shape)

    def vjp(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node("reshape", a.data.reshape(shape), (a,), vjp)


def concat(parts, axis=-1):
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + size)
            if p.requires_grad:
                p._accumulate(g[tuple(sl)])
            offset += size

    return _node("concat", data, parts, vjp)


def narrow(a, start, length, axis=-1):
    """Contiguous slice [start, start+length) along one axis."""
    ax = axis if axis >= 0 else a.data.ndim + axis
    sl = [slice(None)] * a.data.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a._accumulate(full)

    return _node("narrow", a.data[sl], (a,), vjp)


def _unary(op_name, a, fwd, dfdx_from_out):
    data = fwd(a.data)

    def vjp(g):
        a._accumulate(g * dfdx_from_out(data, a.data))

    return _node(op_name, data, (a,), vjp)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda out, _x: 1.0 - out * out)


def relu(a):
    # Subgradient 0 at exactly 0.
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda _out, x: (x > 0).astype(x.dtype))


def sigmoid(a):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda out, _x: out * (1.0 - out))


def exp(a):
    return _unary("exp", a, np.exp, lambda out, _x: out)


def log(a):
    return _unary("log", a, np.log, lambda _out, x: 1.0 / x)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda out, _x: 0.5 / out)


def square(a):
    return _unary("square", a, np.square, lambda _out, x: 2.0 * x)


def softplus(a):
    # log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|) for stability.
    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def dfdx(_out, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("softplus", a, fwd, dfdx)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; subgradient is 0 at and beyond the boundaries."""
    lo = float(lo)
    hi = float(hi)

    def vjp(g):
        inside = (a.data > lo) & (a.data < hi)
        a._accumulate(g * inside.astype(a.data.dtype))

    return _node("clip", np.clip(a.data, lo, hi), (a,), vjp)


def minimum(a, b):
    """Elementwise minimum; ties route the gradient to the first operand."""

    def vjp(g):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a.astype(g.dtype), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (~take_a).astype(g.dtype), b.data.shape))

    return _node("minimum", np.minimum(a.data, b.data), (a, b), vjp)


def causal_softmax_last(a):
    """Row softmax over the last axis with a strict causal mask.

    Input is (..., T, T) attention scores. Entries above the diagonal are
    excluded from the normalization entirely (not merely down-weighted), so
    position t's output depends only on columns <= t; their probabilities
    and gradients are exactly zero, making prefix outputs bit-identical
    regardless of appended future rows.
    """
    x = a.data
    t = x.shape[-1]
    if x.shape[-2] != t:
        raise AutodiffError("causal_softmax_last expects square trailing axes")
    allowed = np.tril(np.ones((t, t), dtype=bool))
    masked = np.where(allowed, x, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    weights = np.where(allowed, np.exp(np.where(allowed, shifted, 0.0)), 0.0)
    # Sequential row totals: appending masked (zero) columns must not
    # change earlier rows' normalization bits, so avoid pairwise sum.
    totals = np.cumsum(weights, axis=-1)[..., -1:]
    out = weights / totals

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        a._accumulate(out * (g - inner))

    return _node("causal_softmax_last", out, (a,), vjp)


def dropout(a, p, rng, train):
    """Inverted dropout: zero with probability p and rescale by 1/(1-p)."""
    p = float(p)
    if not train or p == 0.0:
        def vjp_id(g):
            a._accumulate(g)

        return _node("dropout", a.data.copy(), (a,), vjp_id)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)

    def vjp(g):
        a._accumulate(g * keep)

    return _node("dropout", a.data * keep, (a,), vjp)


def sum_all(a):
    def vjp(g):
        a._accumulate(np.full_like(a.data, float(g)))

    return _node("sum_all", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), vjp)


def mean_all(a):
    n = a.data.size

    def vjp(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    return _node("mean_all", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), vjp)


def sum_last(a, keepdims=True):
    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, -1)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _node("sum_last", a.data.sum(axis=-1, keepdims=keepdims), (a,), vjp)


def mean_last(a, keepdims=True):
    n = a.data.shape[-1]

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, -1)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy() / n)

    return _node("mean_last", a.data.mean(axis=-1, keepdims=keepdims), (a,), vjp)


def mse(pred, target):
    """Mean squared error over all elements; scalar output."""
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        common = (2.0 / n) * float(g) * diff
        if pred.requires_grad:
            pred._accumulate(common)
        if target.requires_grad:
            target._accumulate(-common)

    return _node("mse", np.asarray(np.mean(diff * diff), dtype=pred.data.dtype), (pred, target), vjp)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy from logits; scalar output.

    Stable form: mean(softplus(l) - l * y). Gradient wrt logits is
    (sigmoid(l) - y) / n.
    """
    x = logits.data
    y = targets.data
    sp = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
        if logits.requires_grad:
            logits._accumulate(float(g) / n * (sig - y))
        if targets.requires_grad:
            targets._accumulate(float(g) / n * (-x))

    return _node("bce_with_logits", np.asarray(np.mean(sp - x * y), dtype=x.dtype), (logits, targets), vjp)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine.

    Built from primitive ops so its adjoint needs no bespoke derivation.
    """
    m = mean_last(a, keepdims=True)
    centered = sub(a, m)
    var = mean_last(square(centered), keepdims=True)
    inv = div(centered, sqrt(shift(var, eps)))
    return add(mul(inv, gain), bias)


def backward(root, retain=False):
    """Accumulate gradients of a scalar root into every reachable leaf.

    Nodes are visited exactly once, in reverse tape append order. Calling
    twice without zero_grads() sums the two gradient fields.
    """
    if root.data.size != 1:
        raise AutodiffError("backward requires a scalar root")
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._serial)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(nodes):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
        if not retain and not node.is_leaf:
            node.grad = None


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
