"""Masked attention updates across observed steps with cosine time encoding."""
from __future__ import annotations

import numpy as np

from .batching import STATE_WIDTH
from .substrate import Params, block, init_attention, init_mlp2, masked_self_attention, mlp2
from .substrate import tensor as T
from .substrate.tensor import Var


def init_temporal_params(store: Params, d: int, rng: np.random.Generator, prefix: str = "tg") -> None:
    init_mlp2(store, f"{prefix}.state", STATE_WIDTH, d, d, rng)
    init_attention(store, f"{prefix}.attn", d, rng)
    init_mlp2(store, f"{prefix}.g1", d, d, d, rng)
    # log-spaced angular frequencies from 10 rad/s down to 0.01 rad/s
    store[f"{prefix}.time.omega"] = T.param(10.0 ** np.linspace(1.0, -2.0, d), f"{prefix}.time.omega")
    store[f"{prefix}.time.phase"] = T.param(np.zeros(d), f"{prefix}.time.phase")


def time_encode(t: int, p: Params, dt: float = 0.1) -> Var:
    """cos(omega * t * dt + phase), with time in seconds."""
    if t < 0:
        raise ValueError("time index must be non-negative")
    return T.cos(T.add(T.mul(p["omega"], float(t) * dt), p["phase"]))


def embed_states(states: np.ndarray, p_state: Params) -> Var:
    """State embedding for agent rows present at that step; lanes and absent agents get zero."""
    states = np.asarray(states, dtype=np.float64)
    return T.mul(mlp2(states, p_state), states[..., 2:3])


def init_node_features(ctx, states0: np.ndarray, valid: np.ndarray, p_state: Params) -> Var:
    """Context feature plus an embedding of each node's step-0 state; padding rows stay zero."""
    ctx = T.as_var(ctx)
    states0 = np.asarray(states0, dtype=np.float64)
    if states0.shape[:-1] != ctx.shape[:-1]:
        raise ValueError(f"state rows {states0.shape[:-1]} do not align with context rows {ctx.shape[:-1]}")
    F0 = T.add(ctx, embed_states(states0, p_state))
    return T.mul(F0, np.asarray(valid, dtype=np.float64)[..., None])


def temporal_step(F_prev, mask_t: np.ndarray, p_attn: Params, present_t: np.ndarray | None = None) -> Var:
    """Masked attention over the previous step's features; absent rows carry over unchanged."""
    F_prev = T.as_var(F_prev)
    mask_t = np.asarray(mask_t, dtype=bool)
    if present_t is None:
        present_t = np.diagonal(mask_t, axis1=-2, axis2=-1)
    attended = masked_self_attention(F_prev, mask_t, p_attn, present_t)
    return T.where(np.asarray(present_t, bool)[..., None], attended, F_prev)


def fuse_time(F_hat, t: int, p_time: Params, g1: Params, dt: float = 0.1, extra=None) -> Var:
    x = T.add(F_hat, time_encode(t, p_time, dt))
    if extra is not None:
        x = T.add(x, extra)
    return mlp2(x, g1)


def run_temporal(
    ctx,
    states: np.ndarray,
    present: np.ndarray,
    adjacency: np.ndarray,
    valid: np.ndarray,
    p: Params,
    *,
    dt: float = 0.1,
    state_every_step: bool = False,
) -> list[Var]:
    """F_0 from :func:`init_node_features`, then one shared-weight update per observed step.

    Arrays carry the time axis just before the node axis: ``states`` (..., T, N, S),
    ``present`` (..., T, N), ``adjacency`` (..., T, N, N). Returns [F_0, ..., F_{T-1}].
    """
    p_state, p_attn, g1, p_time = block(p, "state"), block(p, "attn"), block(p, "g1"), block(p, "time")
    n_steps = present.shape[-2]
    F = init_node_features(ctx, states[..., 0, :, :], valid, p_state)
    seq = [F]
    for t in range(1, n_steps):
        pres = present[..., t, :]
        F_hat = temporal_step(F, adjacency[..., t, :, :], p_attn, pres)
        extra = embed_states(states[..., t, :, :], p_state) if state_every_step else None
        fused = fuse_time(F_hat, t, p_time, g1, dt, extra)
        F = T.where(pres[..., None], fused, F)
        seq.append(F)
    return seq
