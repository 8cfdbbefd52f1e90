"""Sequential AoI memory, layered scene memory, and the enhanced AoI representation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .substrate import (
    Params,
    block,
    cross_attention,
    gru_step,
    init_affine,
    init_attention,
    init_gru,
    init_layer_norm,
    init_mlp2,
    layer_norm,
    masked_self_attention,
    max_pool,
    mlp2,
)
from .substrate import tensor as T
from .substrate.tensor import Var


@dataclass
class MemoryState:
    h_seq: Var | None
    h_mem: Var | None


@dataclass
class AgentRepresentation:
    enhanced: Var  # (..., 3d)
    h_seq: Var | None
    h_mem: Var | None
    lane_context_empty: np.ndarray | bool = False

    def composite(self) -> Var:
        parts = [self.enhanced] + [h for h in (self.h_seq, self.h_mem) if h is not None]
        return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def init_seq_memory_params(store: Params, d: int, rng, prefix: str = "seqmem") -> None:
    init_gru(store, f"{prefix}.gru", d, d, rng)


def init_scene_memory_params(store: Params, d: int, n_layers: int, rng, with_mlp: bool = False, prefix: str = "scenemem") -> None:
    init_affine(store, f"{prefix}.g0", d, d, rng)
    for layer in range(n_layers):
        init_attention(store, f"{prefix}.layer{layer}.attn", d, rng)
        init_layer_norm(store, f"{prefix}.layer{layer}.norm", d)
        if with_mlp:
            init_mlp2(store, f"{prefix}.layer{layer}.mlp", d, d, d, rng)
    init_gru(store, f"{prefix}.gru", d, d, rng)


def init_agent_repr_params(store: Params, d: int, rng, prefix: str = "agent") -> None:
    init_attention(store, f"{prefix}.xattn_all", d, rng)
    init_attention(store, f"{prefix}.xattn_lane", d, rng)


def seq_memory_update(f_t, h_prev, p_gru: Params) -> Var:
    return gru_step(f_t, h_prev, p_gru)


def scene_memory_encode(F_t, p: Params, present_t: np.ndarray | None = None, n_layers: int = 3, with_mlp: bool = False) -> Var:
    """Linear init, ``n_layers`` of (self-attention -> layer norm), then max-pool over present rows.

    A slice with no present row pools to the zero vector.
    """
    F_t = T.as_var(F_t)
    if present_t is None:
        present_t = np.ones(F_t.shape[:-1], dtype=bool)
    present_t = np.asarray(present_t, dtype=bool)
    mask = present_t[..., :, None] & present_t[..., None, :]
    M = T.linear(F_t, p["g0.W"], p["g0.b"])
    for layer in range(n_layers):
        M = masked_self_attention(M, mask, block(p, f"layer{layer}.attn"))
        M = layer_norm(M, p[f"layer{layer}.norm.gain"], p[f"layer{layer}.norm.bias"])
        if with_mlp:
            M = mlp2(M, block(p, f"layer{layer}.mlp"))
    return max_pool(M, present_t)


def scene_memory_update(m_t, h_prev, p_gru: Params) -> Var:
    return gru_step(m_t, h_prev, p_gru)


def aoi_rows(F, aoi_node: np.ndarray | int) -> Var:
    """Select the AoI row of each scene: (B, N, d) -> (B, d), or (N, d) -> (d,)."""
    F = T.as_var(F)
    if F.ndim == 2:
        return F[int(aoi_node)]
    aoi_node = np.asarray(aoi_node)
    return F[np.arange(F.shape[0]), aoi_node]


def run_memory(
    F_seq: list,
    aoi_node,
    present: np.ndarray,
    p: Params,
    *,
    seq_mem: bool = True,
    scene_mem: bool = True,
    n_layers: int = 3,
    with_mlp: bool = False,
) -> MemoryState:
    """Roll both GRUs over every step of ``F_seq``; disabled modules yield ``None``."""
    h_seq = h_mem = None
    d = F_seq[0].shape[-1]
    lead = F_seq[0].shape[:-2]
    if seq_mem:
        p_seq = block(p, "seqmem.gru")
        h_seq = T.Var(np.zeros(lead + (d,)))
        for F_t in F_seq:
            h_seq = seq_memory_update(aoi_rows(F_t, aoi_node), h_seq, p_seq)
    if scene_mem:
        p_scene = block(p, "scenemem")
        p_gru = block(p_scene, "gru")
        h_mem = T.Var(np.zeros(lead + (d,)))
        for t, F_t in enumerate(F_seq):
            m_t = scene_memory_encode(F_t, p_scene, present[..., t, :], n_layers, with_mlp)
            h_mem = scene_memory_update(m_t, h_mem, p_gru)
    return MemoryState(h_seq, h_mem)


def assemble_agent_repr(F_T, aoi_node, is_lane: np.ndarray, valid: np.ndarray, mem: MemoryState, p: Params) -> AgentRepresentation:
    """AoI row ‖ cross-attention over all nodes ‖ cross-attention over lane nodes."""
    F_T = T.as_var(F_T)
    f = aoi_rows(F_T, aoi_node)
    q = T.reshape(f, f.shape[:-1] + (1, f.shape[-1]))
    valid = np.asarray(valid, dtype=bool)
    lanes = valid & np.asarray(is_lane, dtype=bool)
    all_ctx = cross_attention(q, F_T, block(p, "xattn_all"), valid)
    lane_ctx = cross_attention(q, F_T, block(p, "xattn_lane"), lanes)
    enhanced = T.concat([f, T.reshape(all_ctx, f.shape), T.reshape(lane_ctx, f.shape)], axis=-1)
    return AgentRepresentation(enhanced, mem.h_seq, mem.h_mem, ~lanes.any(axis=-1))
