"""Training loop, evaluation, prediction export and plotting."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .batching import SceneTensors, collate, prepare_scene
from .config import ConfigError, ModelConfig, TrainConfig, model_config_from_dict, train_config_from_dict
from .metrics import MetricsReport, aggregate, scene_metrics, write_report
from .model import ForecastOutput, Model, NumericalError
from .objective import total_loss
from .predictions import PredictionRecord, from_forecast, read_predictions, write_predictions
from .scene import RawScene, normalize_scene
from .substrate import AdamState, adam_step, load_checkpoint, save_checkpoint
from .substrate import tensor as T

EVAL_BATCH = 64


class TrainingDiverged(NumericalError):
    def __init__(self, scene_id: str, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step} on scene {scene_id!r}{': ' + detail if detail else ''}")
        self.scene_id = scene_id
        self.step = step


class CheckpointMismatch(ConfigError):
    pass


@dataclass
class EpochLog:
    epoch: int
    lr: float
    steps: int
    loss: float
    traj_loss: float
    goal_reg_loss: float
    goal_cls_loss: float
    val: dict | None = None
    checkpoint: str | None = None
    wall_clock: float = 0.0


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    n_train: int
    n_val: int
    epochs: list[EpochLog] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    best_b_min_fde: float | None = None
    wall_clock: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.step_losses)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "epochs": [vars(e) for e in self.epochs],
            "step_losses": self.step_losses,
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "best_b_min_fde": self.best_b_min_fde,
            "wall_clock": self.wall_clock,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def read_run_record(path: str | Path) -> RunRecord:
    d = json.loads(Path(path).read_text())
    epochs = [EpochLog(**e) for e in d.pop("epochs")]
    return RunRecord(epochs=epochs, **d)


# ---------------------------------------------------------------- checkpoints


def save_model(model: Model, path: str | Path, cfg: TrainConfig | None = None) -> None:
    config = {"model": vars(model.cfg) if cfg is None else cfg.to_dict()["model"]}
    if cfg is not None:
        config["train"] = {k: v for k, v in cfg.to_dict().items() if k != "model"}
    save_checkpoint(path, model.arrays(), model.cfg.hash(), json.loads(json.dumps(config)))


def load_model(path: str | Path, expect: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; ``expect`` must hash-match the stored model config."""
    arrays, stored_hash, config = load_checkpoint(path)
    cfg = model_config_from_dict(config["model"])
    if cfg.hash() != stored_hash:
        raise CheckpointMismatch(f"{path}: stored config does not match its hash")
    if expect is not None and expect.hash() != stored_hash:
        raise CheckpointMismatch(f"{path}: checkpoint was trained with a different model config")
    model = Model.init(cfg, 0)
    model.load_arrays(arrays)
    return model


# ---------------------------------------------------------------- training


def augmentation_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def _prepare(scenes: list[RawScene], cfg: TrainConfig, epoch: int | None) -> list[SceneTensors]:
    if epoch is None or not cfg.augment:
        return [prepare_scene(s, cfg.model) for s in scenes]
    return [
        prepare_scene(s, cfg.model, rng=augmentation_rng(cfg.seed, epoch, i), scale_range=cfg.scale_range, noise_sigma=cfg.noise_sigma)
        for i, s in enumerate(scenes)
    ]


def _offending_scene(model: Model, items: list[SceneTensors], cfg: TrainConfig) -> str:
    for it in items:
        try:
            out = model.forward(collate([it]))
            rep = total_loss(out, collate([it]).gt, cfg.model, w_traj=cfg.w_traj, w_goal_reg=cfg.w_goal_reg, w_goal_cls=cfg.w_goal_cls)
        except (NumericalError, FloatingPointError):
            return it.scene_id
        if not np.isfinite(rep.total):
            return it.scene_id
    return items[0].scene_id


def train(
    cfg: TrainConfig,
    train_scenes: list[RawScene],
    val_scenes: list[RawScene] | None,
    out_dir: str | Path,
    *,
    init_arrays: dict[str, np.ndarray] | None = None,
    stop_when: Callable[[MetricsReport], bool] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[Model, RunRecord]:
    """Mini-batch Adam on the winner-takes-all loss.

    Writes ``last.ckpt``, ``best.ckpt`` (lowest validation b-minFDE), optional
    per-epoch checkpoints and ``run.json`` into ``out_dir``. ``stop_when`` is
    consulted after every validation and ends training early when it returns True.
    """
    cfg.validate()
    if not train_scenes:
        raise ConfigError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or (lambda msg: None)
    model = Model.init(cfg.model, cfg.seed)
    if init_arrays:
        copied = {k: v for k, v in init_arrays.items() if k in model.params and model.params[k].data.shape == v.shape}
        for k, v in copied.items():
            model.params[k].data = np.array(v, dtype=np.float64)
        log(f"initialised {len(copied)} parameter blocks from a previous phase")
    record = RunRecord(cfg.model.hash(), cfg.to_dict(), len(train_scenes), len(val_scenes or []))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = AdamState()
    fixed_items = None if cfg.augment else _prepare(train_scenes, cfg, None)
    val_items = _prepare(val_scenes, cfg, None) if val_scenes else None
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        items = fixed_items if fixed_items is not None else _prepare(train_scenes, cfg, epoch)
        order = shuffle_rng.permutation(len(items))
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_items = [items[i] for i in order[start : start + cfg.batch_size]]
            batch = collate(batch_items)
            step = record.n_steps + 1
            try:
                out = model.forward(batch)
                rep = total_loss(out, batch.gt, cfg.model, w_traj=cfg.w_traj, w_goal_reg=cfg.w_goal_reg, w_goal_cls=cfg.w_goal_cls)
            except NumericalError as exc:
                raise TrainingDiverged(_offending_scene(model, batch_items, cfg), step, str(exc)) from exc
            if not np.isfinite(rep.total):
                raise TrainingDiverged(_offending_scene(model, batch_items, cfg), step)
            T.backward(rep.total_var)
            grads = {}
            for name, p in model.params.items():
                if p.grad is not None:
                    grads[name] = p.grad
                    p.grad = None
            adam_step(model.params, grads, opt, lr)
            record.step_losses.append(rep.total)
            sums += (rep.total, rep.traj_loss, rep.goal_reg_loss, rep.goal_cls_loss)
            n_batches += 1
        means = sums / n_batches
        entry = EpochLog(epoch, lr, n_batches, *map(float, means))
        stop = False
        if val_items is not None and (epoch % cfg.validate_every == 0 or epoch == cfg.epochs):
            report = evaluate_items(model, val_items)
            entry.val = report.summary()
            if record.best_b_min_fde is None or report.b_min_fde < record.best_b_min_fde:
                record.best_epoch, record.best_b_min_fde = epoch, report.b_min_fde
                record.best_checkpoint = str(out_dir / "best.ckpt")
                save_model(model, out_dir / "best.ckpt", cfg)
            stop = stop_when is not None and stop_when(report)
        if cfg.keep_epoch_checkpoints:
            entry.checkpoint = str(out_dir / f"epoch_{epoch:03d}.ckpt")
            save_model(model, entry.checkpoint, cfg)
        entry.wall_clock = time.perf_counter() - t_start
        record.epochs.append(entry)
        record.wall_clock = entry.wall_clock
        save_model(model, out_dir / "last.ckpt", cfg)
        record.write(out_dir / "run.json")
        val_msg = "" if entry.val is None else f" val minFDE {entry.val['min_fde']:.3f} b-minFDE {entry.val['b_min_fde']:.3f}"
        log(f"epoch {epoch} lr {lr:g} loss {entry.loss:.4f}{val_msg}")
        if stop:
            break
    if record.best_checkpoint is None:
        record.best_checkpoint = str(out_dir / "last.ckpt")
        record.write(out_dir / "run.json")
    return model, record


def pretrain_then_train(cfg: TrainConfig, pretrain_epochs: int, train_scenes, val_scenes, out_dir, **kw) -> tuple[Model, RunRecord]:
    """Two phases: context encoder plus direct regression head, then the full model from those weights."""
    phase1_model = ModelConfig(**{**vars(cfg.model), "tg": False, "seq_mem": False, "scene_mem": False, "goal_pred": False, "goal_loss": False})
    phase1 = train_config_from_dict({**cfg.to_dict(), "model": vars(phase1_model), "epochs": pretrain_epochs, "lr_decay_epochs": ()})
    m1, _ = train(phase1, train_scenes, val_scenes, Path(out_dir) / "phase1", **kw)
    ctx = {k: v for k, v in m1.arrays().items() if k.startswith("ctx.")}
    return train(cfg, train_scenes, val_scenes, Path(out_dir) / "phase2", init_arrays=ctx, **kw)


# ---------------------------------------------------------------- evaluation


def forecast_items(model: Model, items: list[SceneTensors], batch_size: int = EVAL_BATCH) -> list[ForecastOutput]:
    out: list[ForecastOutput] = []
    for start in range(0, len(items), batch_size):
        out += model.forecast_batch(items[start : start + batch_size])
    return out


def top_k(fc: ForecastOutput, k: int) -> ForecastOutput:
    """Keep the ``k`` most probable modes (first index on ties) and renormalize."""
    if k == fc.probabilities.shape[0]:
        return fc
    if not 1 <= k <= fc.probabilities.shape[0]:
        raise ConfigError(f"cannot evaluate K={k} from a {fc.probabilities.shape[0]}-mode model")
    keep = np.sort(np.argsort(-fc.probabilities, kind="stable")[:k])
    p = fc.probabilities[keep]
    p = p / p.sum() if p.sum() > 0 else np.full(k, 1.0 / k)
    return ForecastOutput(
        fc.scene_id, fc.trajectories[keep], p,
        None if fc.proposals is None else fc.proposals[keep],
        None if fc.refined is None else fc.refined[keep],
        fc.transform,
    )


def metrics_from_records(records: list[PredictionRecord], gts: dict[str, np.ndarray]) -> MetricsReport:
    """``gts`` maps scene id to its normalized-frame future; raw records are mapped back first."""
    rows = []
    for r in records:
        if r.scene_id not in gts:
            raise ConfigError(f"no ground truth for scene {r.scene_id!r}")
        r = r.in_frame("normalized")
        rows.append(scene_metrics(r.scene_id, r.trajectories, r.probabilities, gts[r.scene_id]))
    return aggregate(rows, records[0].k if records else 0)


def evaluate_items(model: Model, items: list[SceneTensors], k: int | None = None) -> MetricsReport:
    k = k or model.cfg.k
    fcs = [top_k(fc, k) for fc in forecast_items(model, items)]
    rows = [scene_metrics(fc.scene_id, fc.trajectories, fc.probabilities, it.gt) for fc, it in zip(fcs, items)]
    return aggregate(rows, k)


def evaluate(checkpoint: str | Path, scenes: list[RawScene], k: int | None = None, *, expect: ModelConfig | None = None,
             report_path: str | Path | None = None) -> MetricsReport:
    model = load_model(checkpoint, expect)
    for s in scenes:
        if s.gt_future is None:
            raise ConfigError(f"scene {s.scene_id!r} has no ground-truth future")
    report = evaluate_items(model, [prepare_scene(s, model.cfg) for s in scenes], k)
    if report_path is not None:
        write_report(report, report_path)
    return report


def ground_truths(scenes: list[RawScene]) -> dict[str, np.ndarray]:
    return {s.scene_id: normalize_scene(s).gt_future for s in scenes}


def predict(checkpoint: str | Path, scenes: list[RawScene], out_path: str | Path, *, frame: str = "normalized",
            k: int | None = None) -> list[PredictionRecord]:
    model = load_model(checkpoint)
    fcs = forecast_items(model, [prepare_scene(s, model.cfg) for s in scenes])
    records = [from_forecast(top_k(fc, k or model.cfg.k), frame) for fc in fcs]
    write_predictions(records, out_path)
    return records


def evaluate_predictions(pred_path: str | Path, scenes: list[RawScene], report_path: str | Path | None = None) -> MetricsReport:
    report = metrics_from_records(read_predictions(pred_path), ground_truths(scenes))
    if report_path is not None:
        write_report(report, report_path)
    return report


# ---------------------------------------------------------------- plotting


def plot(scene: RawScene, record: PredictionRecord, out_path: str | Path) -> Path:
    """Write an SVG of one scene in its normalized frame; predicted modes carry ids ``pred_mode_<i>``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if scene.scene_id != record.scene_id:
        raise ConfigError(f"scene {scene.scene_id!r} does not match prediction {record.scene_id!r}")
    ns = normalize_scene(scene)
    rec = record.in_frame("normalized")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": "tgforecast", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 6))
        for lane in ns.lanes:
            ax.plot(lane.centerline[:, 0], lane.centerline[:, 1], color="0.7", lw=1.0, zorder=1)
        _, obs = ns.aoi.observed(ns.t_obs)
        ax.plot(obs[:, 0], obs[:, 1], color="tab:blue", lw=2.0, zorder=3, gid="aoi_observed")
        if ns.gt_future is not None:
            ax.plot(ns.gt_future[:, 0], ns.gt_future[:, 1], color="tab:green", lw=2.0, zorder=3, gid="gt_future")
        for i, (traj, p) in enumerate(zip(rec.trajectories, rec.probabilities)):
            ax.plot(traj[:, 0], traj[:, 1], color="tab:orange", lw=1.5, zorder=4, gid=f"pred_mode_{i}")
            ax.scatter([traj[-1, 0]], [traj[-1, 1]], s=20 + 180 * float(p), color="tab:orange", zorder=5, gid=f"pred_end_{i}")
        pts = np.concatenate([obs, rec.trajectories.reshape(-1, 2)] + ([ns.gt_future] if ns.gt_future is not None else []))
        lo, hi = pts.min(axis=0) - 15.0, pts.max(axis=0) + 15.0
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(lo[1], hi[1])
        ax.set_aspect("equal")
        ax.set_title(scene.scene_id)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path
