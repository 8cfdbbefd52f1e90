"""Multimodal displacement metrics: minADE, minFDE, miss rate and Brier-minFDE."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MISS_THRESHOLD = 2.0
SIMPLEX_TOL = 1e-6


class MetricsError(ValueError):
    pass


def _check(preds, gt) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] < 1 or preds.shape[1:] != gt.shape:
        raise MetricsError(f"predictions {preds.shape} do not match ground truth {gt.shape}")
    return preds, gt


def endpoint_distances(preds, gt) -> np.ndarray:
    preds, gt = _check(preds, gt)
    return np.linalg.norm(preds[:, -1] - gt[-1], axis=-1)


def min_fde(preds, gt) -> tuple[float, int]:
    """Smallest endpoint error over modes and its mode index (first on ties)."""
    d = endpoint_distances(preds, gt)
    i = int(np.argmin(d))
    return float(d[i]), i


def min_ade(preds, gt) -> float:
    """Average displacement of the mode whose endpoint is closest to the ground truth."""
    preds, gt = _check(preds, gt)
    _, i = min_fde(preds, gt)
    return float(np.mean(np.linalg.norm(preds[i] - gt, axis=-1)))


def miss(preds, gt, threshold: float = MISS_THRESHOLD) -> int:
    """1 when every endpoint is farther than ``threshold``; a distance equal to it is a hit."""
    if not threshold > 0:
        raise MetricsError("miss threshold must be positive")
    return int(bool(np.all(endpoint_distances(preds, gt) > threshold)))


def check_simplex(probs, k: int | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or (k is not None and probs.shape[0] != k):
        raise MetricsError(f"expected {k} probabilities, got shape {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise MetricsError("probabilities must be finite and non-negative")
    if abs(float(probs.sum()) - 1.0) > SIMPLEX_TOL:
        raise MetricsError(f"probabilities sum to {probs.sum():.9f}, not 1")
    return probs


def brier_min_fde(preds, probs, gt) -> float:
    """minFDE plus (1 - p)^2 for the probability p of the minFDE mode."""
    preds, gt = _check(preds, gt)
    probs = check_simplex(probs, preds.shape[0])
    value, i = min_fde(preds, gt)
    return value + (1.0 - float(probs[i])) ** 2


@dataclass
class SceneMetrics:
    scene_id: str
    min_ade: float
    min_fde: float
    miss: int
    b_min_fde: float


def scene_metrics(scene_id: str, preds, probs, gt, threshold: float = MISS_THRESHOLD) -> SceneMetrics:
    return SceneMetrics(
        scene_id, min_ade(preds, gt), min_fde(preds, gt)[0], miss(preds, gt, threshold), brier_min_fde(preds, probs, gt)
    )


@dataclass
class MetricsReport:
    k: int
    rows: list[SceneMetrics]
    min_ade: float
    min_fde: float
    miss_rate: float
    b_min_fde: float
    threshold: float = MISS_THRESHOLD
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def summary(self) -> dict:
        return {
            "k": self.k,
            "n_scenes": len(self.rows),
            "min_ade": self.min_ade,
            "min_fde": self.min_fde,
            "miss_rate": self.miss_rate,
            "b_min_fde": self.b_min_fde,
            "miss_threshold": self.threshold,
        }


def _mean(values) -> float:
    # compensated summation, so the result does not depend on scene order at the 1e-12 level
    return math.fsum(values) / len(values)


def aggregate(rows: list[SceneMetrics], k: int, threshold: float = MISS_THRESHOLD) -> MetricsReport:
    if not rows:
        raise MetricsError("cannot aggregate metrics over zero scenes")
    rows = list(rows)
    return MetricsReport(
        k,
        rows,
        _mean([r.min_ade for r in rows]),
        _mean([r.min_fde for r in rows]),
        _mean([float(r.miss) for r in rows]),
        _mean([r.b_min_fde for r in rows]),
        threshold,
    )


# ---------------------------------------------------------------- report file

_COLUMNS = ("scene_id", "min_ade", "min_fde", "miss", "b_min_fde")


def report_to_text(report: MetricsReport) -> str:
    """CSV with one row per scene followed by a ``# mean`` footer row and a ``# meta`` line."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS)
    for r in report.rows:
        w.writerow([r.scene_id, repr(r.min_ade), repr(r.min_fde), r.miss, repr(r.b_min_fde)])
    w.writerow(["# mean", repr(report.min_ade), repr(report.min_fde), repr(report.miss_rate), repr(report.b_min_fde)])
    w.writerow([f"# meta k={report.k} threshold={report.threshold!r} n={len(report.rows)}"])
    return buf.getvalue()


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(report_to_text(report))


def read_report(path: str | Path) -> MetricsReport:
    lines = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not lines or tuple(lines[0]) != _COLUMNS:
        raise MetricsError(f"{path}: not a metrics report")
    rows, footer, meta = [], None, {}
    for line in lines[1:]:
        if not line:
            continue
        if line[0] == "# mean":
            footer = [float(x) for x in line[1:]]
        elif line[0].startswith("# meta"):
            meta = dict(kv.split("=") for kv in line[0].split()[2:])
        else:
            rows.append(SceneMetrics(line[0], float(line[1]), float(line[2]), int(line[3]), float(line[4])))
    if footer is None or "k" not in meta:
        raise MetricsError(f"{path}: missing aggregate footer")
    return MetricsReport(int(meta["k"]), rows, *footer, threshold=float(meta["threshold"]))
