"""Prediction records: per-scene K modes with probabilities, in the normalized or raw frame."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ForecastOutput
from .scene import Transform

FRAMES = ("normalized", "raw")


class RecordError(ValueError):
    pass


@dataclass
class PredictionRecord:
    scene_id: str
    trajectories: np.ndarray  # (K, 30, 2)
    probabilities: np.ndarray  # (K,)
    frame: str = "normalized"
    transform: Transform | None = None  # raw -> normalized, present when frame == "raw"

    @property
    def k(self) -> int:
        return self.trajectories.shape[0]

    @property
    def endpoints(self) -> np.ndarray:
        return self.trajectories[:, -1]

    def in_frame(self, frame: str, transform: Transform | None = None) -> "PredictionRecord":
        """Re-express the trajectories in ``frame``; ``transform`` is needed only to go normalized -> raw."""
        if frame == self.frame:
            return self
        if frame == "normalized":
            return PredictionRecord(self.scene_id, self.transform.apply(self.trajectories), self.probabilities, frame)
        tf = transform or self.transform
        if tf is None:
            raise RecordError(f"{self.scene_id}: a transform is required to export the raw frame")
        return PredictionRecord(self.scene_id, tf.invert(self.trajectories), self.probabilities, frame, tf)


def from_forecast(fc: ForecastOutput, frame: str = "normalized") -> PredictionRecord:
    if frame not in FRAMES:
        raise RecordError(f"unknown frame {frame!r}")
    rec = PredictionRecord(fc.scene_id, fc.trajectories.copy(), fc.probabilities.copy())
    return rec.in_frame(frame, fc.transform)


def _xy(p) -> dict:
    return {"x": float(p[0]), "y": float(p[1])}


def record_to_dict(rec: PredictionRecord) -> dict:
    out = {
        "scene_id": rec.scene_id,
        "K": rec.k,
        "frame": rec.frame,
        "modes": [
            {"probability": float(p), "endpoint": _xy(traj[-1]), "trajectory": [_xy(q) for q in traj]}
            for p, traj in zip(rec.probabilities, rec.trajectories)
        ],
    }
    if rec.frame == "raw":
        out["transform"] = {"angle": float(rec.transform.angle), "translation": _xy(rec.transform.translation)}
    return out


def record_from_dict(d: dict) -> PredictionRecord:
    try:
        frame = d["frame"]
        if frame not in FRAMES:
            raise RecordError(f"unknown frame {frame!r}")
        modes = d["modes"]
        if len(modes) != d["K"]:
            raise RecordError(f"{d['scene_id']}: K={d['K']} but {len(modes)} modes")
        traj = np.array([[[q["x"], q["y"]] for q in m["trajectory"]] for m in modes], dtype=np.float64)
        probs = np.array([m["probability"] for m in modes], dtype=np.float64)
        tf = None
        if frame == "raw":
            t = d["transform"]
            tf = Transform(t["angle"], [t["translation"]["x"], t["translation"]["y"]])
        return PredictionRecord(d["scene_id"], traj, probs, frame, tf)
    except KeyError as exc:
        raise RecordError(f"prediction record is missing field {exc}") from exc


def write_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"predictions": [record_to_dict(r) for r in records]}, indent=1))


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    data = json.loads(Path(path).read_text())
    if "predictions" not in data:
        raise RecordError(f"{path}: not a predictions file")
    return [record_from_dict(d) for d in data["predictions"]]
