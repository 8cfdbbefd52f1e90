"""Model and training configuration, JSON-backed."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    k: int = 6
    subgraph_layers: int = 3
    scene_layers: int = 3
    # ablation toggles
    tg: bool = True
    seq_mem: bool = True
    scene_mem: bool = True
    goal_pred: bool = True
    goal_loss: bool = True
    # "composite" feeds enhanced + memories to the agent goal head, "enhanced" only the 3d feature
    goal_source: str = "composite"
    state_every_step: bool = False
    scene_mem_mlp: bool = False
    output_scale: float = 10.0
    edge_radius: float = 2.0
    lane_radius: float = 50.0
    lane_filter: str = "any_agent"

    def validate(self) -> None:
        if self.d <= 0 or self.d % 2:
            raise ConfigError("feature width d must be a positive even number")
        if self.k < 2 or self.k % 2:
            raise ConfigError(f"K must be even and >= 2, got {self.k}")
        if self.subgraph_layers < 1 or self.scene_layers < 1:
            raise ConfigError("layer counts must be positive")
        if self.goal_source not in ("composite", "enhanced"):
            raise ConfigError(f"unknown goal_source {self.goal_source!r}")
        if self.lane_filter not in ("any_agent", "aoi"):
            raise ConfigError(f"unknown lane_filter {self.lane_filter!r}")
        if self.goal_loss and not self.goal_pred:
            raise ConfigError("goal_loss requires goal_pred")

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 64
    epochs: int = 36
    lr: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (24, 30)
    lr_decay_factor: float = 5.0
    seed: int = 0
    augment: bool = True
    scale_range: tuple[float, float] = (0.75, 1.25)
    noise_sigma: float = 0.2
    w_traj: float = 1.0
    w_goal_reg: float = 1.0
    w_goal_cls: float = 1.0
    validate_every: int = 1
    keep_epoch_checkpoints: bool = True

    def validate(self) -> None:
        self.model.validate()
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("learning rate and decay factor must be positive")
        if any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ConfigError(f"decay epochs {self.lr_decay_epochs} must precede the last epoch {self.epochs}")
        lo, hi = self.scale_range
        if not 0.75 <= lo <= hi <= 1.25:
            raise ConfigError("scale_range must lie within [0.75, 1.25]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: divided by the factor after each decay epoch."""
        n = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.lr / self.lr_decay_factor**n if n else self.lr

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = model_config_from_dict(d.pop("model", {}))
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    for key in ("lr_decay_epochs", "scale_range"):
        if key in d:
            d[key] = tuple(d[key])
    return TrainConfig(model=model, **d)


def load_train_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    """Read a JSON config and apply flat overrides; ``model.<key>`` addresses model fields."""
    base = json.loads(Path(path).read_text()) if path else {}
    base.setdefault("model", {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("model."):
            base["model"][key[6:]] = value
        else:
            base[key] = value
    cfg = train_config_from_dict(base)
    cfg.validate()
    return cfg
