"""Per-timestep scene graphs over lane and agent nodes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import NormalizedScene


@dataclass(frozen=True)
class TemporalGraph:
    node_ids: tuple[str, ...]  # lanes first, then agents
    n_lanes: int
    aoi_node: int
    present: np.ndarray  # (t_obs, N) bool
    adjacency: np.ndarray  # (t_obs, N, N) bool

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def is_lane(self) -> np.ndarray:
        out = np.zeros(self.n_nodes, dtype=bool)
        out[: self.n_lanes] = True
        return out


def lane_point_distances(scene: NormalizedScene) -> np.ndarray:
    """(n_agents, t_obs, n_lanes) Euclidean distance to the nearest centerline point; inf where absent."""
    n_agents, n_lanes = len(scene.agents), len(scene.lanes)
    out = np.full((n_agents, scene.t_obs, n_lanes), np.inf)
    if n_lanes == 0:
        return out
    pts = np.concatenate([l.centerline for l in scene.lanes])
    starts = np.cumsum([0] + [l.centerline.shape[0] for l in scene.lanes[:-1]])
    for i, a in enumerate(scene.agents):
        times, xy = a.observed(scene.t_obs)
        if times.size == 0:
            continue
        d = np.sqrt(((xy[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
        out[i, times] = np.minimum.reduceat(d, starts, axis=1)
    return out


def build_temporal_graph(scene: NormalizedScene, edge_radius_m: float = 2.0) -> TemporalGraph:
    n_lanes, n_agents = len(scene.lanes), len(scene.agents)
    n = n_lanes + n_agents
    t_obs = scene.t_obs
    aoi = n_lanes + scene.aoi_index
    present = np.zeros((t_obs, n), dtype=bool)
    present[:, :n_lanes] = True
    for i, a in enumerate(scene.agents):
        present[:, n_lanes + i] = a.present_mask(t_obs)

    adj = np.zeros((t_obs, n, n), dtype=bool)
    near = lane_point_distances(scene) < edge_radius_m  # (A, T, L)
    agent_lane = np.transpose(near, (1, 0, 2))  # (T, A, L)
    adj[:, n_lanes:, :n_lanes] = agent_lane
    adj[:, :n_lanes, n_lanes:] = np.transpose(agent_lane, (0, 2, 1))
    others = present[:, n_lanes:].copy()
    adj[:, aoi, n_lanes:] |= others & present[:, aoi : aoi + 1]
    adj[:, n_lanes:, aoi] |= others & present[:, aoi : aoi + 1]
    idx = np.arange(n)
    adj[:, idx, idx] = present
    adj &= present[:, :, None] & present[:, None, :]

    ids = tuple([l.lane_id for l in scene.lanes] + [a.agent_id for a in scene.agents])
    return TemporalGraph(ids, n_lanes, aoi, present, adj)


def mask_at(g: TemporalGraph, t: int) -> np.ndarray:
    if not 0 <= t < g.adjacency.shape[0]:
        raise IndexError(f"time index {t} outside 0..{g.adjacency.shape[0] - 1}")
    return g.adjacency[t]
