"""Scene types, AoI-centric normalization, lane filtering, vectorization and augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

T_OBS = 20
T_FUT = 30
DT = 0.1
TURN_DIRECTIONS = ("none", "left", "right")
ELEMENT_KINDS = ("lane", "agent", "aoi")

# per-vector feature layout, see vector_features()
VECTOR_WIDTH = 16
POSITION_SCALE = 0.1


class SceneError(ValueError):
    """A scene violates its structural invariants."""


class DegenerateHeading(SceneError):
    """The agent of interest never moves during the observed window."""


@dataclass
class AgentTrack:
    agent_id: str
    times: np.ndarray  # (n,) int, strictly increasing, within 0..t_obs+t_fut-1
    xy: np.ndarray  # (n, 2) meters
    is_aoi: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)

    def present_mask(self, t_obs: int = T_OBS) -> np.ndarray:
        mask = np.zeros(t_obs, dtype=bool)
        mask[self.times[self.times < t_obs]] = True
        return mask

    def observed(self, t_obs: int = T_OBS) -> tuple[np.ndarray, np.ndarray]:
        keep = self.times < t_obs
        return self.times[keep], self.xy[keep]

    def position_at(self, t: int) -> np.ndarray | None:
        hit = np.flatnonzero(self.times == t)
        return self.xy[hit[0]] if hit.size else None


@dataclass
class LaneSegment:
    lane_id: str
    centerline: np.ndarray  # (m, 2), m >= 2
    is_intersection: bool = False
    turn_direction: str = "none"

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 2)


@dataclass
class Transform:
    """Rigid map ``q = R(angle) p + translation`` from raw to normalized coordinates."""

    angle: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    def _rotate(self, pts: np.ndarray, angle: float) -> np.ndarray:
        # elementwise so a point maps identically alone or inside an array
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(angle), math.sin(angle)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([c * x - s * y, s * x + c * y], axis=-1)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self._rotate(pts, self.angle) + self.translation

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return self._rotate(np.asarray(pts, dtype=np.float64) - self.translation, -self.angle)


@dataclass
class RawScene:
    scene_id: str
    agents: list[AgentTrack]
    lanes: list[LaneSegment]
    aoi_id: str
    gt_future: np.ndarray | None = None  # (t_fut, 2)
    t_obs: int = T_OBS
    t_fut: int = T_FUT
    dt: float = DT

    def __post_init__(self):
        if self.gt_future is not None:
            self.gt_future = np.asarray(self.gt_future, dtype=np.float64).reshape(-1, 2)

    @property
    def aoi(self) -> AgentTrack:
        return next(a for a in self.agents if a.is_aoi)

    @property
    def aoi_index(self) -> int:
        return next(i for i, a in enumerate(self.agents) if a.is_aoi)

    def validate(self) -> None:
        where = f"scene {self.scene_id!r}"
        if self.t_obs + self.t_fut != 50 or not math.isclose(self.dt, DT):
            raise SceneError(f"{where}: expected 20+30 steps at dt=0.1, got {self.t_obs}+{self.t_fut} at dt={self.dt}")
        aois = [a for a in self.agents if a.is_aoi]
        if len(aois) != 1:
            raise SceneError(f"{where}: expected exactly one agent of interest, found {len(aois)}")
        if aois[0].agent_id != self.aoi_id:
            raise SceneError(f"{where}: aoi_id {self.aoi_id!r} does not match flagged agent {aois[0].agent_id!r}")
        horizon = self.t_obs + self.t_fut
        for a in self.agents:
            if a.times.size != a.xy.shape[0]:
                raise SceneError(f"{where}: agent {a.agent_id!r} has mismatched steps and positions")
            if a.times.size and (np.any(np.diff(a.times) <= 0) or a.times[0] < 0 or a.times[-1] >= horizon):
                raise SceneError(f"{where}: agent {a.agent_id!r} time indices must be strictly increasing in 0..{horizon - 1}")
            if not np.all(np.isfinite(a.observed(self.t_obs)[1])):
                raise SceneError(f"{where}: agent {a.agent_id!r} has non-finite observed positions")
        if not aois[0].present_mask(self.t_obs).all():
            raise SceneError(f"{where}: agent of interest must be present at all {self.t_obs} observed steps")
        for lane in self.lanes:
            if lane.centerline.shape[0] < 2:
                raise SceneError(f"{where}: lane {lane.lane_id!r} needs at least 2 centerline points")
            if np.any(np.all(np.diff(lane.centerline, axis=0) == 0, axis=1)):
                raise SceneError(f"{where}: lane {lane.lane_id!r} has repeated consecutive points")
            if lane.turn_direction not in TURN_DIRECTIONS:
                raise SceneError(f"{where}: lane {lane.lane_id!r} has unknown turn direction {lane.turn_direction!r}")
        if self.gt_future is not None and self.gt_future.shape != (self.t_fut, 2):
            raise SceneError(f"{where}: gt_future must have {self.t_fut} points, got {self.gt_future.shape[0]}")


@dataclass
class NormalizedScene(RawScene):
    transform: Transform = field(default_factory=Transform)


# ---------------------------------------------------------------- geometry helpers


def _map_scene(scene: RawScene, fn, transform: Transform | None = None) -> NormalizedScene:
    agents = [AgentTrack(a.agent_id, a.times.copy(), fn(a.xy), a.is_aoi) for a in scene.agents]
    lanes = [LaneSegment(l.lane_id, fn(l.centerline), l.is_intersection, l.turn_direction) for l in scene.lanes]
    gt = None if scene.gt_future is None else fn(scene.gt_future)
    if transform is None:
        transform = getattr(scene, "transform", Transform())
    return NormalizedScene(
        scene.scene_id, agents, lanes, scene.aoi_id, gt, scene.t_obs, scene.t_fut, scene.dt, transform=transform
    )


def aoi_heading(scene: RawScene) -> float:
    """Heading at the last observed step from the last two distinct observed positions."""
    _, xy = scene.aoi.observed(scene.t_obs)
    last = xy[-1]
    for prev in xy[-2::-1]:
        if np.any(prev != last):
            d = last - prev
            return math.atan2(d[1], d[0])
    raise DegenerateHeading(f"scene {scene.scene_id!r}: agent of interest is stationary over the observed window")


def normalize_scene(scene: RawScene) -> NormalizedScene:
    """Translate and rotate so the AoI sits at the origin heading +x at the last observed step."""
    heading = aoi_heading(scene)
    anchor = scene.aoi.position_at(scene.t_obs - 1)
    rot = Transform(-heading)
    tf = Transform(-heading, -rot.apply(anchor))
    return _map_scene(scene, tf.apply, tf)


def filter_lanes(scene: NormalizedScene, radius_m: float = 50.0, variant: str = "any_agent") -> NormalizedScene:
    """Keep lanes with some centerline point at Manhattan distance < radius from an observed agent position.

    ``variant="aoi"`` measures only against the agent of interest.
    """
    if variant not in ("any_agent", "aoi"):
        raise ValueError(f"unknown lane filter variant {variant!r}")
    agents = scene.agents if variant == "any_agent" else [scene.aoi]
    obs = [a.observed(scene.t_obs)[1] for a in agents]
    pts = np.concatenate(obs) if obs else np.zeros((0, 2))
    kept = []
    for lane in scene.lanes:
        if pts.size == 0:
            continue
        d = np.abs(lane.centerline[:, None, :] - pts[None, :, :]).sum(axis=-1)
        if d.min() < radius_m:
            kept.append(lane)
    return replace(scene, lanes=kept)


def augment_scale(scene: NormalizedScene, s: float) -> NormalizedScene:
    if not 0.75 <= s <= 1.25:
        raise ValueError(f"scale factor {s} outside [0.75, 1.25]")
    return _map_scene(scene, lambda p: p * s)


def augment_noise(scene: NormalizedScene, sigma: float = 0.2, seed=None) -> NormalizedScene:
    """Gaussian jitter on lane points and observed agent positions; targets stay clean."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    lanes = []
    for lane in scene.lanes:
        noise = rng.normal(0.0, sigma, size=lane.centerline.shape) if sigma > 0 else 0.0
        lanes.append(LaneSegment(lane.lane_id, lane.centerline + noise, lane.is_intersection, lane.turn_direction))
    agents = []
    for a in scene.agents:
        xy = a.xy.copy()
        obs = a.times < scene.t_obs
        if sigma > 0:
            xy[obs] += rng.normal(0.0, sigma, size=(int(obs.sum()), 2))
        agents.append(AgentTrack(a.agent_id, a.times.copy(), xy, a.is_aoi))
    return replace(scene, agents=agents, lanes=lanes)


# ---------------------------------------------------------------- vectorization


@dataclass
class Polyline:
    element_index: int
    kind: str  # one of ELEMENT_KINDS
    starts: np.ndarray  # (n, 2)
    ends: np.ndarray  # (n, 2)
    t_start: np.ndarray  # (n,) step index of each vector's start; zeros for lanes
    t_end: np.ndarray
    is_intersection: bool = False
    turn_direction: str = "none"
    empty: bool = False

    def __len__(self) -> int:
        return self.starts.shape[0]


@dataclass
class PolylineSet:
    polylines: list[Polyline]  # lanes first, then agents, in scene order
    n_lanes: int

    @property
    def empty_flags(self) -> list[int]:
        return [p.element_index for p in self.polylines if p.empty]


def vectorize(scene: NormalizedScene) -> PolylineSet:
    polylines = []
    for lane in scene.lanes:
        c = lane.centerline
        n = c.shape[0] - 1
        polylines.append(
            Polyline(len(polylines), "lane", c[:-1].copy(), c[1:].copy(), np.zeros(n, int), np.zeros(n, int),
                     lane.is_intersection, lane.turn_direction)
        )
    for a in scene.agents:
        times, xy = a.observed(scene.t_obs)
        kind = "aoi" if a.is_aoi else "agent"
        polylines.append(
            Polyline(len(polylines), kind, xy[:-1].copy(), xy[1:].copy(), times[:-1].copy(), times[1:].copy(),
                     empty=times.size < 2)
        )
    return PolylineSet(polylines, len(scene.lanes))


def vector_features(poly: Polyline, t_obs: int = T_OBS) -> np.ndarray:
    """Pack each vector of ``poly`` into a ``VECTOR_WIDTH`` feature row."""
    n = len(poly)
    out = np.zeros((n, VECTOR_WIDTH))
    if n == 0:
        return out
    out[:, 0:2] = poly.starts * POSITION_SCALE
    out[:, 2:4] = poly.ends * POSITION_SCALE
    out[:, 4:6] = poly.ends - poly.starts
    out[:, 6 + ELEMENT_KINDS.index(poly.kind)] = 1.0
    out[:, 9] = float(poly.is_intersection)
    out[:, 10 + TURN_DIRECTIONS.index(poly.turn_direction)] = 1.0
    if poly.kind != "lane":
        out[:, 13] = poly.t_start / (t_obs - 1)
        out[:, 14] = poly.t_end / (t_obs - 1)
    return out


# ---------------------------------------------------------------- record format


def scene_to_record(scene: RawScene) -> dict:
    rec = {
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "t_obs": scene.t_obs,
        "t_fut": scene.t_fut,
        "aoi_id": scene.aoi_id,
        "agents": [
            {"id": a.agent_id, "steps": [{"t": int(t), "x": float(p[0]), "y": float(p[1])} for t, p in zip(a.times, a.xy)]}
            for a in scene.agents
        ],
        "lanes": [
            {
                "id": l.lane_id,
                "centerline": [{"x": float(p[0]), "y": float(p[1])} for p in l.centerline],
                "is_intersection": bool(l.is_intersection),
                "turn_direction": l.turn_direction,
            }
            for l in scene.lanes
        ],
        "gt_future": None if scene.gt_future is None else [{"x": float(p[0]), "y": float(p[1])} for p in scene.gt_future],
    }
    return rec


def _field(rec: dict, key: str, where: str):
    if key not in rec:
        raise SceneError(f"{where}: missing field {key!r}")
    return rec[key]


def scene_from_record(rec: dict, source: str = "<record>") -> RawScene:
    """Parse and validate a scene record; schema errors name the field and record."""
    where = f"{source} (scene {rec.get('scene_id', '?')!r})" if isinstance(rec, dict) else source
    if not isinstance(rec, dict):
        raise SceneError(f"{where}: record must be an object")
    try:
        aoi_id = str(_field(rec, "aoi_id", where))
        agents = []
        for i, a in enumerate(_field(rec, "agents", where)):
            steps = _field(a, "steps", f"{where} agents[{i}]")
            times = [int(_field(s, "t", f"{where} agents[{i}].steps")) for s in steps]
            xy = [[float(_field(s, "x", where)), float(_field(s, "y", where))] for s in steps]
            aid = str(_field(a, "id", f"{where} agents[{i}]"))
            is_aoi = bool(a.get("is_aoi", aid == aoi_id))
            agents.append(AgentTrack(aid, np.array(times, dtype=np.int64), np.array(xy).reshape(-1, 2), is_aoi))
        lanes = []
        for i, l in enumerate(_field(rec, "lanes", where)):
            pts = [[float(_field(p, "x", where)), float(_field(p, "y", where))] for p in _field(l, "centerline", f"{where} lanes[{i}]")]
            lanes.append(
                LaneSegment(str(_field(l, "id", f"{where} lanes[{i}]")), np.array(pts).reshape(-1, 2),
                            bool(l.get("is_intersection", False)), str(l.get("turn_direction", "none")))
            )
        gt = rec.get("gt_future")
        gt_arr = None if gt is None else np.array([[float(p["x"]), float(p["y"])] for p in gt]).reshape(-1, 2)
        scene = RawScene(
            str(_field(rec, "scene_id", where)), agents, lanes, aoi_id, gt_arr,
            int(_field(rec, "t_obs", where)), int(_field(rec, "t_fut", where)), float(_field(rec, "dt", where)),
        )
    except (TypeError, KeyError, AttributeError) as exc:
        raise SceneError(f"{where}: malformed record ({exc})") from exc
    # duplicated AoI flags are a validation error even though ids are unique
    n_aoi_ids = sum(1 for a in agents if a.agent_id == aoi_id)
    if n_aoi_ids > 1:
        raise SceneError(f"{where}: {n_aoi_ids} agents share the aoi_id {aoi_id!r}")
    scene.validate()
    return scene


def write_scene(scene: RawScene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_record(scene), indent=1) + "\n")


def read_scene(path: str | Path) -> RawScene:
    path = Path(path)
    try:
        rec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: cannot parse scene record ({exc})") from exc
    return scene_from_record(rec, str(path))
