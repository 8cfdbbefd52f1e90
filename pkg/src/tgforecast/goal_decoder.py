"""Goal proposal, refinement/scoring and goal-conditioned trajectory completion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import AgentRepresentation
from .substrate import Params, affine, block, cross_attention, init_affine, init_attention, init_mlp2, max_pool, mlp2
from .substrate import tensor as T
from .substrate.tensor import Var


class OddKError(ValueError):
    pass


@dataclass
class GoalSet:
    proposals: Var  # (..., K, 2)
    refined: Var  # (..., K, 2)
    logits: Var  # (..., K)
    scores: Var  # (..., K), softmax of logits


def composite_width(d: int, seq_mem: bool, scene_mem: bool) -> int:
    return 3 * d + d * int(seq_mem) + d * int(scene_mem)


def init_goal_params(store: Params, d: int, k: int, agent_width: int, traj_agent_width: int, scene_mem: bool, rng, prefix: str = "goal") -> None:
    if scene_mem:
        init_affine(store, f"{prefix}.agg", d, d, rng)
    init_mlp2(store, f"{prefix}.g2", 2 * d if scene_mem else d, d, d, rng)
    init_mlp2(store, f"{prefix}.agent_head", agent_width, d, k, rng)
    init_mlp2(store, f"{prefix}.map_head", d, d, k, rng)
    init_affine(store, f"{prefix}.point.fc1", 2 + 3 * d, d, rng)
    init_affine(store, f"{prefix}.point.fc2", d, d, rng)
    init_affine(store, f"{prefix}.point.fc3", d, d, rng)
    init_attention(store, f"{prefix}.xattn", d, rng)
    init_affine(store, f"{prefix}.offset", 2 * d, 2, rng)
    init_affine(store, f"{prefix}.score", 2 * d, 1, rng)
    init_mlp2(store, "traj.head", traj_agent_width + d, d, 60, rng)


def init_direct_params(store: Params, d: int, k: int, agent_width: int, rng, prefix: str = "direct") -> None:
    init_mlp2(store, f"{prefix}.head", agent_width, d, k * 60, rng)


def map_feature(F_T, is_lane: np.ndarray, h_mem: Var | None, p: Params) -> Var:
    """g2(max-pool of lane rows ‖ agg(h_mem)); with no lanes the pooled term is zero."""
    lane_pool = max_pool(F_T, np.asarray(is_lane, dtype=bool))
    parts = [lane_pool]
    if h_mem is not None:
        parts.append(affine(h_mem, block(p, "agg")))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    return mlp2(x, block(p, "g2"))


def propose_goals(agent_in, map_f, p: Params, k: int, scale: float = 1.0) -> Var:
    """K/2 goals from the agent head then K/2 from the map head: (..., K, 2)."""
    if k < 2 or k % 2:
        raise OddKError(f"K must be even and >= 2, got {k}")
    agent_in, map_f = T.as_var(agent_in), T.as_var(map_f)
    lead = agent_in.shape[:-1]
    a = T.reshape(mlp2(agent_in, block(p, "agent_head")), lead + (k // 2, 2))
    m = T.reshape(mlp2(map_f, block(p, "map_head")), lead + (k // 2, 2))
    return T.mul(T.concat([a, m], axis=-2), scale)


def encode_goal_points(points, enhanced, p: Params, scale: float = 1.0) -> Var:
    """Three affine layers with ReLU between over (point / scale ‖ enhanced): (..., K, d)."""
    points, enhanced = T.as_var(points), T.as_var(enhanced)
    k = points.shape[-2]
    lead = enhanced.shape[:-1]
    enh = T.broadcast_to(T.reshape(enhanced, lead + (1, enhanced.shape[-1])), lead + (k, enhanced.shape[-1]))
    x = T.concat([T.mul(points, 1.0 / scale), enh], axis=-1)
    h = T.relu(affine(x, block(p, "fc1")))
    h = T.relu(affine(h, block(p, "fc2")))
    return affine(h, block(p, "fc3"))


def refine_and_score(proposals, point_feats, F_T, p: Params, valid: np.ndarray | None = None, scale: float = 1.0) -> GoalSet:
    """Cross-attend point features to the scene, then regress offsets and logits."""
    proposals, point_feats = T.as_var(proposals), T.as_var(point_feats)
    attended = cross_attention(point_feats, F_T, block(p, "xattn"), valid)
    h = T.concat([point_feats, attended], axis=-1)
    offsets = T.mul(affine(h, block(p, "offset")), scale)
    logits = T.reshape(affine(h, block(p, "score")), h.shape[:-1])
    refined = T.add(proposals, offsets)
    return GoalSet(proposals, refined, logits, T.masked_softmax(logits))


def complete_trajectory(agent_in, goal_feat, p_head: Params, scale: float = 1.0, t_fut: int = 30) -> Var:
    """mlp2 over (agent ‖ goal feature) emitting absolute positions: (..., t_fut, 2)."""
    agent_in, goal_feat = T.as_var(agent_in), T.as_var(goal_feat)
    if agent_in.shape[:-1] != goal_feat.shape[:-1]:
        lead = goal_feat.shape[:-1]
        agent_in = T.broadcast_to(T.reshape(agent_in, agent_in.shape[:-1] + (1, agent_in.shape[-1])), lead + (agent_in.shape[-1],))
    out = mlp2(T.concat([agent_in, goal_feat], axis=-1), p_head)
    return T.mul(T.reshape(out, out.shape[:-1] + (t_fut, 2)), scale)


def decode_goals(agent: AgentRepresentation, F_T, is_lane, valid, p: Params, k: int, scale: float, goal_source: str = "composite"):
    """Full goal path. Returns (GoalSet, trajectories (..., K, 30, 2))."""
    goal_p = block(p, "goal")
    composite = agent.composite()
    map_f = map_feature(F_T, np.asarray(is_lane) & np.asarray(valid), agent.h_mem, goal_p)
    head_in = composite if goal_source == "composite" else agent.enhanced
    proposals = propose_goals(head_in, map_f, goal_p, k, scale)
    point_p = block(goal_p, "point")
    feats = encode_goal_points(proposals, agent.enhanced, point_p, scale)
    goals = refine_and_score(proposals, feats, F_T, goal_p, valid, scale)
    goal_feats = encode_goal_points(goals.refined, agent.enhanced, point_p, scale)
    traj = complete_trajectory(composite, goal_feats, block(p, "traj.head"), scale)
    return goals, traj


def decode_direct(agent: AgentRepresentation, p: Params, k: int, scale: float) -> Var:
    """Goal-free variant: regress K trajectories straight from the agent representation."""
    composite = agent.composite()
    out = mlp2(composite, block(p, "direct.head"))
    return T.mul(T.reshape(out, out.shape[:-1] + (k, 30, 2)), scale)
