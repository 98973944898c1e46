"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design notes
------------
* Define-by-run: every operation immediately computes its forward value and
  records a backward closure; the graph is rebuilt from scratch each step.
* Broadcasting is restricted to leading batch dimensions: two operands must
  either have identical shapes, or the smaller operand's shape must equal a
  trailing suffix of the larger one's. This keeps every gradient rule a
  plain sum over the leading axes.
* ``detach`` returns a parentless node sharing the same value buffer; any
  path through it contributes exactly zero gradient upstream.
* The softmax counter is per-context (a contextvars variable), never a
  module global. ``softmax`` and ``log_softmax`` are the counted
  distribution normalizations; attention weighting and the loss primitives
  normalize internally without touching the counter. One increment is
  recorded per *row* (per distribution), so a batched call on (B, V) adds B.

A graph and its nodes are confined to one thread for the duration of a
step; distinct graphs on distinct threads are independent.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from .kernels import impl as K

_GRAD_ENABLED = contextvars.ContextVar("e2ebt_grad_enabled", default=True)
_SOFTMAX_COUNTER = contextvars.ContextVar("e2ebt_softmax_counter", default=None)


class SoftmaxCounter:
    """Counts softmax-family normalizations (one per distribution row)."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


@contextlib.contextmanager
def count_softmax():
    """Context manager yielding a fresh counter wired to this context."""
    counter = SoftmaxCounter()
    token = _SOFTMAX_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _SOFTMAX_COUNTER.reset(token)


def _bump_softmax(rows):
    counter = _SOFTMAX_COUNTER.get()
    if counter is not None:
        counter.count += rows


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward values only)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled():
    return _GRAD_ENABLED.get()


class Node:
    """A value in the computation graph.

    ``values`` is a dense numpy array; ``grad`` has the same shape and is
    materialized lazily on the first backward contribution. ``_parents``
    holds only the upstream nodes that require gradient; ``_backward`` is
    the local rule accumulating into them.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.values.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False, dtype=None):
    """Wrap array-like data in a leaf node."""
    arr = np.asarray(values, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Node(arr, requires_grad=requires_grad)


def constant(values, dtype=None):
    return tensor(values, requires_grad=False, dtype=dtype)


def _as_node(x, like=None):
    if isinstance(x, Node):
        return x
    dtype = like.values.dtype if like is not None else None
    return tensor(x, dtype=dtype)


def _make(values, inputs, backward_fn):
    """Build an op node; prunes the graph when nothing needs gradient."""
    if _GRAD_ENABLED.get():
        parents = tuple(p for p in inputs if p.requires_grad)
        if parents:
            return Node(values, requires_grad=True, _parents=parents,
                        _backward=backward_fn)
    return Node(values)


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.values)
    node.grad += g


def _reduce_to(g, shape):
    """Sum gradient over leading broadcast axes down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def _check_suffix(a_shape, b_shape, op):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if big[len(big) - len(small):] != small:
        raise ValueError(
            f"{op}: shapes {a_shape} and {b_shape} only broadcast over "
            "leading batch dimensions")


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Populates ``grad`` on every reachable node with ``requires_grad``;
    visits each node exactly once (reverse topological order).
    """
    if loss.values.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not np.isfinite(loss.values):
        raise FloatingPointError("backward on a non-finite loss")
    if not loss.requires_grad:
        return

    order = []
    visited = {id(loss)}
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, False))

    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_node(a), _as_node(b, like=a)
    _check_suffix(a.shape, b.shape, "add")
    out = a.values + b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g, b.values.shape))

    return _make(out, (a, b), bwd)


def sub(a, b):
    return add(a, scale(_as_node(b, like=_as_node(a)), -1.0))


def mul(a, b):
    a, b = _as_node(a), _as_node(b, like=a)
    _check_suffix(a.shape, b.shape, "mul")
    out = a.values * b.values

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.values, a.values.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.values, b.values.shape))

    return _make(out, (a, b), bwd)


def scale(a, k):
    """Multiply by a python scalar."""
    k = float(k)
    out = a.values * k

    def bwd(g):
        _accumulate(a, g * k)

    return _make(out, (a,), bwd)


def matmul(a, b):
    """Matrix product; operands must be at least 2-D. Leading batch
    dimensions follow the suffix-broadcast rule."""
    a, b = _as_node(a), _as_node(b, like=a)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = np.matmul(a.values, b.values)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            _accumulate(a, _reduce_to(ga, a.values.shape))
        if b.requires_grad:
            if b.values.ndim == 2:
                k = a.values.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.values.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = _reduce_to(np.matmul(np.swapaxes(a.values, -1, -2), g),
                                b.values.shape)
            _accumulate(b, gb)

    return _make(out, (a, b), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.values.transpose(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inverse))

    return _make(out, (a,), bwd)


def reshape(a, shape):
    out = a.values.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.values.shape))

    return _make(out, (a,), bwd)


def concat(nodes, axis):
    nodes = [_as_node(n) for n in nodes]
    out = np.concatenate([n.values for n in nodes], axis=axis)
    sizes = [n.values.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if node.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                _accumulate(node, g[tuple(index)])

    return _make(out, tuple(nodes), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.values[index]

    def bwd(g):
        full = np.zeros_like(a.values)
        full[index] = g
        _accumulate(a, full)

    return _make(out, (a,), bwd)


def detach(a):
    """Forward identity; severs the gradient path (no parents)."""
    return Node(a.values)


def _rows(x):
    return int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1


def softmax(a):
    """Distribution softmax over the last axis. Counted.

    Raises on non-finite logits.
    """
    a = _as_node(a)
    if not np.isfinite(a.values).all():
        raise ValueError("softmax: non-finite logits")
    _bump_softmax(_rows(a.values))
    flat = np.ascontiguousarray(a.values.reshape(-1, a.values.shape[-1]))
    p = K.softmax2d(flat).reshape(a.values.shape)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        p2 = p.reshape(g2.shape)
        _accumulate(a, K.softmax2d_grad(p2, g2).reshape(a.values.shape))

    return _make(p, (a,), bwd)


def log_softmax(a):
    """Log-domain softmax over the last axis. Counted (it is one softmax
    normalization, performed in log space)."""
    a = _as_node(a)
    if not np.isfinite(a.values).all():
        raise ValueError("log_softmax: non-finite logits")
    _bump_softmax(_rows(a.values))
    flat = np.ascontiguousarray(a.values.reshape(-1, a.values.shape[-1]))
    lp = K.log_softmax2d(flat).reshape(a.values.shape)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        lp2 = lp.reshape(g2.shape)
        _accumulate(a, K.log_softmax2d_grad(lp2, g2).reshape(a.values.shape))

    return _make(lp, (a,), bwd)


_MASK_FILL = -1e30  # exp() underflows to exactly 0, masked grads are exact 0


def masked_attention(scores, mask):
    """Attention weighting: softmax over the last axis with a boolean keep
    mask (numpy-broadcastable to ``scores``). Not counted — this is the
    internal attention normalization, not a vocabulary distribution.

    Rows with no kept key degrade to a uniform distribution; callers mask
    those rows out of any loss.
    """
    filled = np.where(mask, scores.values, scores.values.dtype.type(_MASK_FILL))
    flat = np.ascontiguousarray(filled.reshape(-1, filled.shape[-1]))
    p = K.softmax2d(flat).reshape(filled.shape)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        p2 = p.reshape(g2.shape)
        _accumulate(scores, K.softmax2d_grad(p2, g2).reshape(filled.shape))

    return _make(p, (scores,), bwd)


def log(a):
    """Elementwise natural log; the caller guarantees positive input."""
    out = np.log(a.values)

    def bwd(g):
        _accumulate(a, g / a.values)

    return _make(out, (a,), bwd)


def exp(a):
    out = np.exp(a.values)

    def bwd(g):
        _accumulate(a, g * out)

    return _make(out, (a,), bwd)


def relu(a):
    out = np.maximum(a.values, 0)

    def bwd(g):
        _accumulate(a, g * (a.values > 0))

    return _make(out, (a,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learnable gain/bias."""
    d = x.values.shape[-1]
    flat = np.ascontiguousarray(x.values.reshape(-1, d))
    y, mean, rstd = K.layernorm2d(flat, gain.values, bias.values, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = K.layernorm2d_grad(flat, gain.values, mean, rstd, g2)
        if x.requires_grad:
            _accumulate(x, gx.reshape(x.values.shape))
        if gain.requires_grad:
            _accumulate(gain, ggain)
        if bias.requires_grad:
            _accumulate(bias, gbias)

    return _make(y.reshape(x.values.shape), (x, gain, bias), bwd)


def embedding(table, ids):
    """Row-select from a parameter matrix by integer ids (any id shape).

    The differentiable one-hot route is ``matmul(one_hots, table)``.
    """
    ids = np.asarray(ids)
    out = table.values[ids]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.values.shape[-1]))
        _accumulate(table, gt)

    return _make(out, (table,), bwd)


def sum_all(a):
    """Reduce to a scalar by summation."""
    out = a.values.sum()

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.values.shape))

    return _make(np.asarray(out), (a,), bwd)


def cross_entropy(logits, target, mask=None):
    """Cross-entropy over the last axis against a probability-vector target.

    ``target`` is an integer id array (shape = logits.shape[:-1]), a plain
    probability array, or a Node carrying probability vectors (gradient
    then also flows into the target). ``mask`` weights each position; the
    result is the masked sum divided by the mask total (per-token mean).
    """
    v = logits.values.shape[-1]
    rows_shape = logits.values.shape[:-1]
    flat = np.ascontiguousarray(logits.values.reshape(-1, v))
    lp = K.log_softmax2d(flat)

    target_node = target if isinstance(target, Node) else None
    tvals = target.values if target_node is not None else np.asarray(target)
    if tvals.ndim == len(rows_shape):
        tflat = tvals.reshape(-1).astype(np.int64)
    else:
        tflat = np.ascontiguousarray(tvals.reshape(-1, v), dtype=flat.dtype)

    if mask is None:
        w = np.ones(flat.shape[0], dtype=flat.dtype)
    else:
        w = np.asarray(mask, dtype=flat.dtype).reshape(-1)
    denom = w.sum()
    if flat.shape[0] == 0 or denom <= 0:
        raise ValueError("cross_entropy: empty batch")

    nll = K.nll_rows(lp, tflat)
    out = np.asarray((nll * w).sum() / denom)

    def bwd(g):
        coeff = (g * w / denom)[:, None]
        if logits.requires_grad:
            p = np.exp(lp)
            if tflat.ndim == 1:
                t = np.zeros_like(p)
                t[np.arange(p.shape[0]), tflat] = 1
                tsum = 1.0
            else:
                t = tflat
                tsum = t.sum(axis=1, keepdims=True)
            _accumulate(logits, ((p * tsum - t) * coeff).reshape(logits.values.shape))
        if target_node is not None and target_node.requires_grad:
            _accumulate(target_node, (-lp * coeff).reshape(target_node.values.shape))

    inputs = (logits, target_node) if target_node is not None else (logits,)
    return _make(out, inputs, bwd)


def passthrough(a, values, coeff=1.0):
    """Forward ``values`` with gradient rerouted into ``a`` scaled by ``coeff``.

    Numerically this is ``coeff * a + detach(values - coeff * a)`` with the
    forward buffer set to ``values`` exactly (no float re-assembly). It is
    the building block for straight-through estimators.
    """
    values = np.asarray(values, dtype=a.values.dtype)
    if values.shape != a.values.shape:
        raise ValueError(
            f"passthrough: value shape {values.shape} != input shape {a.values.shape}")
    coeff = float(coeff)

    def bwd(g):
        _accumulate(a, g * coeff)

    return _make(values, (a,), bwd)


def categorical_kl(logits, prior, mask=None):
    """Sum over positions of KL(softmax(logits) || prior).

    ``prior`` is a plain probability array (the reference distribution is
    fixed); gradient flows into ``logits`` only. ``mask`` selects which
    rows count.
    """
    v = logits.values.shape[-1]
    flat = np.ascontiguousarray(logits.values.reshape(-1, v))
    pflat = np.ascontiguousarray(np.asarray(prior).reshape(-1, v), dtype=flat.dtype)
    if pflat.shape != flat.shape:
        raise ValueError("categorical_kl: distribution size mismatch")
    lq = K.log_softmax2d(flat)
    kl = K.kl_rows(lq, pflat)
    if mask is None:
        w = np.ones(flat.shape[0], dtype=flat.dtype)
    else:
        w = np.asarray(mask, dtype=flat.dtype).reshape(-1)
    out = np.asarray((kl * w).sum())

    def bwd(g):
        gk = K.kl_rows_grad(lq, pflat, kl, np.ascontiguousarray(g * w, dtype=flat.dtype))
        _accumulate(logits, gk.reshape(logits.values.shape))

    return _make(out, (logits,), bwd)
