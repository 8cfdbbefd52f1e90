"""Randomized micro-scenes and whole-model gradient checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import collate, prepare_scene
from .config import ModelConfig
from .model import Model
from .objective import total_loss
from .scene import T_FUT, T_OBS, AgentTrack, LaneSegment, RawScene
from .substrate.gradcheck import directional_check


def micro_scene(rng: np.random.Generator, scene_id: str = "micro") -> RawScene:
    """A small random scene: 2-4 agents with a few dropped observations and 2-5 short lanes."""
    n_agents = int(rng.integers(2, 5))
    n_lanes = int(rng.integers(2, 6))
    agents = []
    for i in range(n_agents):
        start = rng.uniform(-8, 8, size=2)
        vel = rng.uniform(-3, 3, size=2) + (np.array([4.0, 0.0]) if i == 0 else 0.0)
        acc = rng.normal(0, 0.3, size=2)
        t = np.arange(T_OBS + T_FUT) * 0.1
        xy = start + vel * t[:, None] + 0.5 * acc * t[:, None] ** 2
        times = np.arange(T_OBS + T_FUT) if i == 0 else np.arange(T_OBS)
        xy = xy[times]
        if i > 0:
            keep = rng.random(times.size) > 0.15
            keep[-2:] = keep[-2:] | (i == 1)
            times, xy = times[keep], xy[keep]
        agents.append(AgentTrack("aoi" if i == 0 else f"a{i}", times, xy))
    lanes = []
    for j in range(n_lanes):
        p0 = rng.uniform(-10, 10, size=2)
        steps = rng.normal(0, 1, size=(int(rng.integers(2, 6)), 2)) * 2.0
        lanes.append(LaneSegment(f"l{j}", np.vstack([p0, p0 + np.cumsum(steps, axis=0)]), bool(rng.random() < 0.3)))
    aoi = agents[0]
    obs = aoi.times < T_OBS
    track = AgentTrack("aoi", aoi.times[obs], aoi.xy[obs], is_aoi=True)
    scene = RawScene(scene_id, [track] + agents[1:], lanes, "aoi", aoi.xy[~obs].copy())
    scene.validate()
    return scene


@dataclass
class GradCheckResult:
    scene_id: str
    worst: float
    worst_block: str
    per_block: dict[str, float]
    n_params: int
    kinks_skipped: int = 0


def model_grad_check(
    scene: RawScene,
    cfg: ModelConfig,
    seed: int = 0,
    *,
    n_dirs: int = 1,
    eps: float = 1e-4,
) -> GradCheckResult:
    """Central differences of the total loss against the analytic gradient for every parameter block,
    along ``n_dirs`` random whole-block directions per block."""
    model = Model.init(cfg, seed)
    batch = collate([prepare_scene(scene, cfg)])

    def loss():
        return total_loss(model.forward(batch), batch.gt, cfg).total_var

    res = directional_check(loss, model.params, eps, n_dirs=n_dirs, rng=np.random.default_rng(seed))
    blocks = res.per_block
    for p in model.params.values():
        p.grad = None
    n_coords = sum(p.data.size for p in model.params.values())
    worst_block = max(blocks, key=blocks.get)
    return GradCheckResult(scene.scene_id, blocks[worst_block], worst_block, blocks, n_coords, res.kinks_skipped)


def run_grad_checks(n_scenes: int, seed: int, d: int = 8, n_dirs: int = 1) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=d)
    return [model_grad_check(micro_scene(rng, f"micro-{i}"), cfg, seed + i, n_dirs=n_dirs) for i in range(n_scenes)]
