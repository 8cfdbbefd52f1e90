"""End-to-end forecaster: context -> temporal graph -> memory -> goals -> trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batching import Batch, SceneTensors, collate, prepare_scene
from .config import ModelConfig
from .context_encoder import encode_context, init_context_params
from .goal_decoder import (
    GoalSet,
    composite_width,
    decode_direct,
    decode_goals,
    init_direct_params,
    init_goal_params,
)
from .memory import (
    AgentRepresentation,
    MemoryState,
    assemble_agent_repr,
    init_agent_repr_params,
    init_scene_memory_params,
    init_seq_memory_params,
    run_memory,
)
from .scene import RawScene, Transform
from .substrate import Params, block
from .substrate import tensor as T
from .substrate.tensor import Var
from .temporal_encoder import init_temporal_params, run_temporal


class NumericalError(FloatingPointError):
    pass


@dataclass
class ForwardOutput:
    trajectories: Var  # (B, K, 30, 2)
    probabilities: Var  # (B, K)
    goals: GoalSet | None
    agent: AgentRepresentation
    F_seq: list[Var]
    memory: MemoryState
    ctx: Var


@dataclass
class ForecastOutput:
    """Numpy view of one scene's forecast, in the normalized frame."""

    scene_id: str
    trajectories: np.ndarray  # (K, 30, 2)
    probabilities: np.ndarray  # (K,)
    proposals: np.ndarray | None
    refined: np.ndarray | None
    transform: Transform = field(default_factory=Transform)

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1]

    def to_raw(self) -> np.ndarray:
        return self.transform.invert(self.trajectories)


class Model:
    def __init__(self, cfg: ModelConfig, params: Params):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        cfg.validate()
        rng = np.random.default_rng(seed)
        d, k = cfg.d, cfg.k
        store: Params = {}
        init_context_params(store, d, cfg.subgraph_layers, rng)
        if cfg.tg:
            init_temporal_params(store, d, rng)
        if cfg.seq_mem:
            init_seq_memory_params(store, d, rng)
        if cfg.scene_mem:
            init_scene_memory_params(store, d, cfg.scene_layers, rng, cfg.scene_mem_mlp)
        init_agent_repr_params(store, d, rng)
        comp = composite_width(d, cfg.seq_mem, cfg.scene_mem)
        if cfg.goal_pred:
            head_w = comp if cfg.goal_source == "composite" else 3 * d
            init_goal_params(store, d, k, head_w, comp, cfg.scene_mem, rng)
        else:
            init_direct_params(store, d, k, comp, rng)
        return cls(cfg, store)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ValueError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, a in arrays.items():
            if a.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {self.params[k].data.shape}")
            self.params[k].data = np.array(a, dtype=np.float64)

    # ------------------------------------------------------------ forward

    def forward(self, batch: Batch) -> ForwardOutput:
        cfg, p = self.cfg, self.params
        ctx = encode_context(batch.vec_feats, batch.seg_starts, batch.seg_node, batch.valid, block(p, "ctx"), cfg.subgraph_layers)
        _check("context_encoder.encode_context", ctx)
        n_steps = batch.present.shape[1]
        if cfg.tg:
            F_seq = run_temporal(
                ctx, batch.states, batch.present, batch.adjacency, batch.valid, block(p, "tg"),
                state_every_step=cfg.state_every_step,
            )
        else:
            F_seq = [ctx] * n_steps
        _check("temporal_encoder.run_temporal", F_seq[-1])
        mem = run_memory(
            F_seq, batch.aoi_node, batch.present, p, seq_mem=cfg.seq_mem, scene_mem=cfg.scene_mem,
            n_layers=cfg.scene_layers, with_mlp=cfg.scene_mem_mlp,
        )
        F_T = F_seq[-1]
        agent = assemble_agent_repr(F_T, batch.aoi_node, batch.is_lane, batch.valid, mem, block(p, "agent"))
        _check("memory.assemble_agent_repr", agent.composite())
        if cfg.goal_pred:
            goals, traj = decode_goals(agent, F_T, batch.is_lane, batch.valid, p, cfg.k, cfg.output_scale, cfg.goal_source)
            _check("goal_decoder.refine_and_score", goals.refined)
            probs = goals.scores
        else:
            goals = None
            traj = decode_direct(agent, p, cfg.k, cfg.output_scale)
            probs = T.Var(np.full((batch.size, cfg.k), 1.0 / cfg.k))
        _check("goal_decoder.complete_trajectory", traj)
        return ForwardOutput(traj, probs, goals, agent, F_seq, mem, ctx)

    def forecast_batch(self, items: list[SceneTensors]) -> list[ForecastOutput]:
        batch = collate(items)
        out = self.forward(batch)
        res = []
        for i, sid in enumerate(batch.scene_ids):
            res.append(
                ForecastOutput(
                    sid,
                    out.trajectories.data[i].copy(),
                    out.probabilities.data[i].copy(),
                    None if out.goals is None else out.goals.proposals.data[i].copy(),
                    None if out.goals is None else out.goals.refined.data[i].copy(),
                    batch.transforms[i],
                )
            )
        return res


def _check(where: str, v: Var) -> None:
    if not np.all(np.isfinite(v.data)):
        raise NumericalError(f"non-finite values produced in {where}")


def forecast(scene: RawScene, model: Model, k: int | None = None) -> ForecastOutput:
    """Forecast one raw scene; trajectories are in the normalized frame with the transform attached."""
    if k is not None and k != model.cfg.k:
        raise ValueError(f"model was built for K={model.cfg.k}, asked for K={k}")
    return model.forecast_batch([prepare_scene(scene, model.cfg)])[0]
