"""Winner-takes-all training losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .substrate import tensor as T
from .substrate.tensor import Var

LOG_FLOOR = 1e-12


@dataclass
class LossReport:
    traj_loss: float
    goal_reg_loss: float
    goal_cls_loss: float
    total: float
    best_mode_index: np.ndarray  # (B,)
    closest_goal_index: np.ndarray  # (B,)
    total_var: Var | None = None


def smooth_l1(x: float) -> float:
    a = abs(x)
    return 0.5 * x * x if a < 1.0 else a - 0.5


def closest_goal_index(refined: np.ndarray, gt_end: np.ndarray) -> int:
    """Index of the goal nearest ``gt_end``; ties go to the lowest index."""
    d = np.linalg.norm(np.asarray(refined, float) - np.asarray(gt_end, float), axis=-1)
    return int(np.argmin(d))


def goal_losses(refined: np.ndarray, scores: np.ndarray, gt_end: np.ndarray) -> tuple[float, float]:
    """(mean smooth-L1 of the closest goal, -log of its score)."""
    i = closest_goal_index(refined, gt_end)
    res = np.asarray(refined, float)[i] - np.asarray(gt_end, float)
    reg = sum(smooth_l1(float(r)) for r in res) / res.size
    cls = -math.log(max(float(scores[i]), LOG_FLOOR))
    return reg, cls


def trajectory_loss(trajectories: np.ndarray, refined: np.ndarray | None, gt: np.ndarray) -> float:
    """Mean smooth-L1 of the selected mode; selection by refined goal, or by endpoint without goals."""
    trajectories = np.asarray(trajectories, float)
    anchors = trajectories[:, -1] if refined is None else refined
    i = closest_goal_index(anchors, gt[-1])
    res = (trajectories[i] - gt).ravel()
    return sum(smooth_l1(float(r)) for r in res) / res.size


def _select(x: Var, idx: np.ndarray) -> Var:
    return x[np.arange(idx.shape[0]), idx]


def total_loss(out, gt: np.ndarray, cfg, *, w_traj: float = 1.0, w_goal_reg: float = 1.0, w_goal_cls: float = 1.0) -> LossReport:
    """Batch-mean loss on a :class:`~tgforecast.model.ForwardOutput`.

    Mode selection is computed on values and held constant for backpropagation.
    """
    gt = np.asarray(gt, dtype=np.float64)
    gt_end = gt[:, -1]
    traj = out.trajectories
    b = gt.shape[0]
    if cfg.goal_pred:
        refined = out.goals.refined
        dist = np.linalg.norm(refined.data - gt_end[:, None, :], axis=-1)
        best = np.argmin(dist, axis=-1)
    else:
        dist = np.linalg.norm(traj.data[:, :, -1] - gt_end[:, None, :], axis=-1)
        best = np.argmin(dist, axis=-1)

    traj_term = T.mean(T.smooth_l1(T.sub(_select(traj, best), gt)))
    total = T.mul(traj_term, w_traj)
    reg_v = cls_v = 0.0
    if cfg.goal_pred:
        reg_term = T.mean(T.smooth_l1(T.sub(_select(out.goals.refined, best), gt_end)))
        logp = T.log_softmax(out.goals.logits)
        cls_term = T.mul(T.sum_(_select(logp, best)), -1.0 / b)
        reg_v, cls_v = float(reg_term.data), float(cls_term.data)
        if cfg.goal_loss:
            total = T.add(total, T.mul(reg_term, w_goal_reg))
        total = T.add(total, T.mul(cls_term, w_goal_cls))
    return LossReport(float(traj_term.data), reg_v, cls_v, float(total.data), best, best, total)
