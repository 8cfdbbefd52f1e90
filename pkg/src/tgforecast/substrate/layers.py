"""Parameterized primitives built on :mod:`tgforecast.substrate.tensor`.

Parameters live in flat ``dict[str, Var]`` stores with dotted names; a
parameter block is the sub-dict sharing a prefix. Vectors are rows: every
primitive acts on the last axis and broadcasts over leading axes, so the
same code serves a single scene and a padded batch.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Var

Params = dict[str, Var]


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    """A present node has no admissible attention target."""


# ---------------------------------------------------------------- initialization


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_affine(store: Params, name: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
    store[f"{name}.W"] = T.param(glorot(rng, n_out, n_in), f"{name}.W")
    if bias:
        store[f"{name}.b"] = T.param(np.zeros(n_out), f"{name}.b")


def init_layer_norm(store: Params, name: str, d: int) -> None:
    store[f"{name}.gain"] = T.param(np.ones(d), f"{name}.gain")
    store[f"{name}.bias"] = T.param(np.zeros(d), f"{name}.bias")


def init_mlp2(store: Params, name: str, n_in: int, n_hidden: int, n_out: int, rng) -> None:
    init_affine(store, f"{name}.fc1", n_in, n_hidden, rng)
    init_layer_norm(store, f"{name}.norm", n_hidden)
    init_affine(store, f"{name}.fc2", n_hidden, n_out, rng)


def init_attention(store: Params, name: str, d: int, rng) -> None:
    for key in ("W_Q", "W_K", "W_V"):
        store[f"{name}.{key}"] = T.param(glorot(rng, d, d), f"{name}.{key}")


def init_gru(store: Params, name: str, n_in: int, d: int, rng) -> None:
    for gate in ("z", "r", "h"):
        store[f"{name}.W_{gate}"] = T.param(glorot(rng, d, n_in), f"{name}.W_{gate}")
        store[f"{name}.U_{gate}"] = T.param(glorot(rng, d, d), f"{name}.U_{gate}")
        store[f"{name}.b_{gate}"] = T.param(np.zeros(d), f"{name}.b_{gate}")


def block(store: Params, prefix: str) -> Params:
    """Sub-dict of ``store`` under ``prefix.`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in store.items() if k.startswith(head)}


# ---------------------------------------------------------------- primitives


def affine(x, p: Params) -> Var:
    """``W x + b`` with ``W`` of shape (out, in)."""
    x = T.as_var(x)
    w = p["W"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: input width {x.shape[-1]} != weight fan-in {w.shape[1]}")
    return T.linear(x, w, p.get("b"))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    return T.layer_norm(T.as_var(x), T.as_var(gain), T.as_var(bias), eps)


def mlp2(x, p: Params) -> Var:
    """affine -> layer norm -> ReLU -> affine."""
    h = affine(x, block(p, "fc1"))
    h = layer_norm(h, p["norm.gain"], p["norm.bias"])
    return affine(T.relu(h), block(p, "fc2"))


def _scores(q: Var, k: Var) -> Var:
    return T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))


def masked_self_attention(F, mask: np.ndarray, p: Params, present: np.ndarray | None = None) -> Var:
    """Single-head self-attention where ``mask[..., i, j]`` allows i to attend to j.

    Rows with no allowed entry are zero. If ``present`` is given, every
    present row must allow at least one entry.
    """
    F = T.as_var(F)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (F.shape[-2], F.shape[-2]):
        raise ShapeError(f"mask shape {mask.shape} does not match {F.shape[-2]} nodes")
    if present is not None:
        bad = np.asarray(present, dtype=bool) & ~mask.any(axis=-1)
        if bad.any():
            raise MaskError(f"present node(s) {np.argwhere(bad).tolist()} have an all-false mask row")
    q = T.linear(F, p["W_Q"])
    k = T.linear(F, p["W_K"])
    v = T.linear(F, p["W_V"])
    weights = T.masked_softmax(_scores(q, k), mask)
    return T.matmul(weights, v)


def cross_attention(queries, context, p: Params, context_mask: np.ndarray | None = None) -> Var:
    """Each query row attends over the (optionally masked) context rows."""
    queries, context = T.as_var(queries), T.as_var(context)
    if context.shape[-2] == 0:
        raise ShapeError("cross_attention: empty context")
    mask = None
    if context_mask is not None:
        mask = np.expand_dims(np.asarray(context_mask, dtype=bool), -2)
    q = T.linear(queries, p["W_Q"])
    k = T.linear(context, p["W_K"])
    v = T.linear(context, p["W_V"])
    weights = T.masked_softmax(_scores(q, k), mask)
    return T.matmul(weights, v)


def gru_step(x, h, p: Params) -> Var:
    x, h = T.as_var(x), T.as_var(h)
    z = T.sigmoid(T.linear(x, p["W_z"], p["b_z"]) + T.linear(h, p["U_z"]))
    r = T.sigmoid(T.linear(x, p["W_r"], p["b_r"]) + T.linear(h, p["U_r"]))
    cand = T.tanh(T.linear(x, p["W_h"], p["b_h"]) + T.linear(r * h, p["U_h"]))
    return h + z * (cand - h)


def max_pool(rows, mask: np.ndarray | None = None) -> Var:
    rows = T.as_var(rows)
    if rows.shape[-2] == 0:
        raise ShapeError("max_pool: no rows")
    return T.masked_max(rows, mask, axis=-2)
