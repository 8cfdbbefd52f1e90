"""Scene preprocessing into model arrays and padded batching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .scene import (
    POSITION_SCALE,
    VECTOR_WIDTH,
    NormalizedScene,
    RawScene,
    Transform,
    augment_noise,
    augment_scale,
    filter_lanes,
    normalize_scene,
    vector_features,
    vectorize,
)
from .temporal_graph import TemporalGraph, build_temporal_graph

STATE_WIDTH = 3


@dataclass
class SceneTensors:
    scene_id: str
    poly_feats: np.ndarray  # (N, V, VECTOR_WIDTH)
    poly_mask: np.ndarray  # (N, V) bool
    is_lane: np.ndarray  # (N,) bool
    aoi_node: int
    present: np.ndarray  # (t_obs, N) bool
    adjacency: np.ndarray  # (t_obs, N, N) bool
    states: np.ndarray  # (t_obs, N, STATE_WIDTH) per-step node state; zeros for lanes and absent agents
    transform: Transform
    gt: np.ndarray | None  # (t_fut, 2) normalized frame
    empty_polylines: tuple[int, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.is_lane.shape[0]


@dataclass
class Batch:
    scene_ids: list[str]
    vec_feats: np.ndarray  # (M, F) vectors of all non-empty polylines, packed
    seg_starts: np.ndarray  # (S,) first packed row of each non-empty polyline
    seg_node: np.ndarray  # (S,) flat node index b * N + n of each polyline
    valid: np.ndarray  # (B, N)
    is_lane: np.ndarray  # (B, N)
    aoi_node: np.ndarray  # (B,)
    present: np.ndarray  # (B, t_obs, N)
    adjacency: np.ndarray  # (B, t_obs, N, N)
    states: np.ndarray  # (B, t_obs, N, S)
    gt: np.ndarray | None  # (B, t_fut, 2)
    transforms: list[Transform]

    @property
    def size(self) -> int:
        return len(self.scene_ids)


def node_states(scene: NormalizedScene, n_lanes: int) -> np.ndarray:
    n = n_lanes + len(scene.agents)
    out = np.zeros((scene.t_obs, n, STATE_WIDTH))
    for i, a in enumerate(scene.agents):
        times, xy = a.observed(scene.t_obs)
        out[times, n_lanes + i, :2] = xy * POSITION_SCALE
        out[times, n_lanes + i, 2] = 1.0
    return out


def tensors_from_normalized(scene: NormalizedScene, graph: TemporalGraph | None = None, edge_radius: float = 2.0) -> SceneTensors:
    graph = graph or build_temporal_graph(scene, edge_radius)
    polys = vectorize(scene)
    v_max = max([len(p) for p in polys.polylines] + [1])
    n = len(polys.polylines)
    feats = np.zeros((n, v_max, VECTOR_WIDTH))
    mask = np.zeros((n, v_max), dtype=bool)
    for i, p in enumerate(polys.polylines):
        feats[i, : len(p)] = vector_features(p, scene.t_obs)
        mask[i, : len(p)] = True
    return SceneTensors(
        scene.scene_id, feats, mask, graph.is_lane, graph.aoi_node, graph.present, graph.adjacency,
        node_states(scene, graph.n_lanes), scene.transform,
        None if scene.gt_future is None else scene.gt_future.copy(), tuple(polys.empty_flags),
    )


def prepare_scene(
    raw: RawScene,
    cfg: ModelConfig,
    *,
    rng: np.random.Generator | None = None,
    scale_range: tuple[float, float] = (0.75, 1.25),
    noise_sigma: float = 0.2,
) -> SceneTensors:
    """normalize -> filter -> (augment if ``rng``) -> vectorize + graph."""
    scene = filter_lanes(normalize_scene(raw), cfg.lane_radius, cfg.lane_filter)
    if rng is not None:
        scene = augment_scale(scene, float(rng.uniform(*scale_range)))
        scene = augment_noise(scene, noise_sigma, rng)
    return tensors_from_normalized(scene, edge_radius=cfg.edge_radius)


def collate(items: list[SceneTensors]) -> Batch:
    if not items:
        raise ValueError("cannot collate an empty batch")
    b = len(items)
    n = max(it.n_nodes for it in items)
    t_obs = items[0].present.shape[0]
    vecs, starts, seg_node = [], [], []
    offset = 0
    valid = np.zeros((b, n), dtype=bool)
    is_lane = np.zeros((b, n), dtype=bool)
    present = np.zeros((b, t_obs, n), dtype=bool)
    adj = np.zeros((b, t_obs, n, n), dtype=bool)
    states = np.zeros((b, t_obs, n, STATE_WIDTH))
    for i, it in enumerate(items):
        m = it.n_nodes
        for j in range(m):
            row = it.poly_feats[j][it.poly_mask[j]]
            if row.shape[0]:
                vecs.append(row)
                starts.append(offset)
                seg_node.append(i * n + j)
                offset += row.shape[0]
        valid[i, :m] = True
        is_lane[i, :m] = it.is_lane
        present[i, :, :m] = it.present
        adj[i, :, :m, :m] = it.adjacency
        states[i, :, :m] = it.states
    gts = [it.gt for it in items]
    gt = None if any(g is None for g in gts) else np.stack(gts)
    return Batch(
        [it.scene_id for it in items],
        np.concatenate(vecs) if vecs else np.zeros((0, VECTOR_WIDTH)),
        np.array(starts, dtype=np.int64), np.array(seg_node, dtype=np.int64), valid, is_lane,
        np.array([it.aoi_node for it in items]), present, adj, states, gt, [it.transform for it in items],
    )
