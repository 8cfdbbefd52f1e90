"""Reverse-mode differentiation over a fixed set of float64 array operations.

Each operation records its parents and a closure that maps the output
gradient to parent gradients. ``backward`` walks the recorded graph in
reverse topological order. Only the operations defined here are supported.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class Var:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        data,
        parents: Sequence["Var"] = (),
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def param(data, name: str | None = None) -> Var:
    """Leaf node that accumulates gradients."""
    return Var(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(data, parents, backward_fn) -> Var:
    out = Var(data, parents)
    if out.requires_grad:
        out.backward_fn = backward_fn
    else:
        out.parents = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Var, grad: np.ndarray | float | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if grad is None:
        if root.data.size != 1:
            raise ValueError("backward() without an explicit gradient needs a scalar root")
        grad = np.ones_like(root.data)
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def relu(x: Var) -> Var:
    x = as_var(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x: Var) -> Var:
    x = as_var(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Var) -> Var:
    x = as_var(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def cos(x: Var) -> Var:
    x = as_var(x)
    return _node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def log(x: Var, floor: float = 0.0) -> Var:
    """Natural log of ``max(x, floor)``; the floored region has zero gradient."""
    x = as_var(x)
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    active = x.data >= floor

    def bw(g):
        return (g * active / clipped,)

    return _node(np.log(clipped), (x,), bw)


def smooth_l1(x: Var) -> Var:
    x = as_var(x)
    a = np.abs(x.data)
    inner = a < 1.0
    out = np.where(inner, 0.5 * x.data * x.data, a - 0.5)
    return _node(out, (x,), lambda g: (g * np.where(inner, x.data, np.sign(x.data)),))


def where(cond: np.ndarray, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Var, shape) -> Var:
    x = as_var(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Var, a1: int, a2: int) -> Var:
    x = as_var(x)
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def broadcast_to(x: Var, shape) -> Var:
    x = as_var(x)
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x: Var, idx) -> Var:
    x = as_var(x)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), bw)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([x.data for x in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_max(x: Var, mask: np.ndarray | None = None, axis: int = -2) -> Var:
    """Maximum over ``axis`` restricted to ``mask``; fully masked slices give zero.

    ``mask`` has the shape of ``x`` without the trailing feature axis. Ties
    route the gradient to the lowest index.
    """
    x = as_var(x)
    axis = axis % x.ndim
    if mask is None:
        filled = x.data
        empty = None
    else:
        m = np.expand_dims(np.asarray(mask, dtype=bool), -1)
        filled = np.where(m, x.data, -np.inf)
        empty = ~m.any(axis=axis)
    arg = np.argmax(filled, axis=axis)
    out = np.take_along_axis(filled, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    if empty is not None:
        empty = np.broadcast_to(empty, out.shape)
        out = np.where(empty, 0.0, out)

    def bw(g):
        if empty is not None:
            g = np.where(empty, 0.0, g)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is (out, in)."""
    x, w = as_var(x), as_var(w)
    parents = (x, w) if b is None else (x, w, as_var(b))
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data.T
    if b is not None:
        out += parents[2].data
    out = out.reshape(lead + (w.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, parents, bw)


def matmul(a: Var, b: Var) -> Var:
    """Batched ``a @ b`` with matching leading dimensions."""
    a, b = as_var(a), as_var(b)

    def bw(g):
        return (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        )

    return _node(a.data @ b.data, (a, b), bw)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw(g):
        gg = g.reshape(-1, d)
        g_gain = (gg * xhat.reshape(-1, d)).sum(axis=0)
        g_bias = gg.sum(axis=0)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def masked_softmax(logits: Var, mask: np.ndarray | None = None) -> Var:
    """Softmax over the last axis with disallowed entries at exactly zero weight.

    Rows without any allowed entry produce all-zero weights.
    """
    logits = as_var(logits)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (logits,), bw)


def log_softmax(logits: Var) -> Var:
    logits = as_var(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (logits,), bw)


def l2_normalize(x: Var, eps: float = 1e-12) -> Var:
    """Unit-norm rows over the last axis; rows with norm below ``eps`` map to zero."""
    x = as_var(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = n > eps
    safe = np.where(ok, n, 1.0)
    u = np.where(ok, x.data / safe, 0.0)

    def bw(g):
        gx = (g - u * (g * u).sum(axis=-1, keepdims=True)) / safe
        return (np.where(ok, gx, 0.0),)

    return _node(u, (x,), bw)


# ---------------------------------------------------------------- packed segments


def segment_max(x: Var, starts: np.ndarray) -> Var:
    """Row-wise maximum within contiguous, non-empty row segments beginning at ``starts``.

    Ties send the gradient to the first row of the segment attaining the maximum.
    """
    x = as_var(x)
    starts = np.asarray(starts, dtype=np.int64)
    out = np.maximum.reduceat(x.data, starts, axis=0)
    lengths = np.diff(np.append(starts, x.shape[0]))
    seg = np.repeat(np.arange(starts.size), lengths)
    rows = np.arange(x.shape[0])[:, None]
    cand = np.where(x.data == out[seg], rows, x.shape[0])
    first = np.minimum.reduceat(cand, starts, axis=0)
    cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[first, cols] = g
        return (gx,)

    return _node(out, (x,), bw)


def segment_broadcast(x: Var, starts: np.ndarray, n_rows: int) -> Var:
    """Repeat segment row ``i`` over its rows: (S, d) -> (n_rows, d)."""
    x = as_var(x)
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.diff(np.append(starts, n_rows))
    seg = np.repeat(np.arange(starts.size), lengths)

    def bw(g):
        return (np.add.reduceat(g, starts, axis=0),)

    return _node(x.data[seg], (x,), bw)


def scatter_rows(x: Var, index: np.ndarray, n_rows: int) -> Var:
    """Place row ``i`` of ``x`` at ``index[i]`` (unique) of an otherwise zero (n_rows, d) array."""
    x = as_var(x)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.data

    def bw(g):
        return (g[index],)

    return _node(out, (x,), bw)
