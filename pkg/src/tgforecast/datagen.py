"""Seed-reproducible synthetic traffic scenes.

Layouts are built from dense reference paths; agents move along routes by
arc length under piecewise-constant acceleration, with a constant lateral
offset from the centerline.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import DT, T_FUT, T_OBS, AgentTrack, LaneSegment, RawScene, read_scene, write_scene

LAYOUTS = ("straight", "curve", "t_intersection", "four_way")
BEHAVIORS = ("constant_speed", "decelerate_yield", "accelerate", "turn_left", "turn_right", "lane_follow")
LANE_WIDTH = 3.5
POINT_SPACING = 1.5
SEGMENT_VECTORS = 15
STOP_LINE = 8.0  # distance of intersection entry from its center
ARM_LENGTH = 45.0
LATERAL_NOISE = 0.3
N_STEPS = T_OBS + T_FUT


class TemplateError(ValueError):
    pass


# ---------------------------------------------------------------- paths


class Path2D:
    """Arc-length parameterized polyline."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
        self.points = pts[keep]
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def position(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], axis=-1)

    def tangent(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        d = self.points[i + 1] - self.points[i]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def left_normal(self, s) -> np.ndarray:
        t = self.tangent(s)
        return np.stack([-t[:, 1], t[:, 0]], axis=-1)

    def resample(self, spacing: float) -> np.ndarray:
        n = max(2, int(math.ceil(self.length / spacing)) + 1)
        return self.position(np.linspace(0.0, self.length, n))

    def __add__(self, other: "Path2D") -> "Path2D":
        return Path2D(np.concatenate([self.points, other.points]))


def line(a, b) -> Path2D:
    return Path2D(np.array([a, b], dtype=np.float64))


def arc(center, radius: float, start_angle: float, end_angle: float, step: float = 0.25) -> Path2D:
    n = max(3, int(abs(end_angle - start_angle) * radius / step) + 1)
    ang = np.linspace(start_angle, end_angle, n)
    return Path2D(np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=-1))


def bezier(p0, c, p1, step: float = 0.25) -> Path2D:
    p0, c, p1 = (np.asarray(v, dtype=np.float64) for v in (p0, c, p1))
    approx = np.linalg.norm(c - p0) + np.linalg.norm(p1 - c)
    u = np.linspace(0.0, 1.0, max(3, int(approx / step) + 1))[:, None]
    return Path2D((1 - u) ** 2 * p0 + 2 * (1 - u) * u * c + u**2 * p1)


def offset_path(path: Path2D, offset: float) -> Path2D:
    """Shift every point along the local left normal (negative = right)."""
    pts = path.points
    tan = np.gradient(pts, axis=0)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    normal = np.stack([-tan[:, 1], tan[:, 0]], axis=-1)
    return Path2D(pts + offset * normal)


def chop(path: Path2D, lane_id: str, is_intersection: bool = False, turn: str = "none", single: bool = False) -> list[LaneSegment]:
    pts = path.resample(POINT_SPACING)
    if single:
        return [LaneSegment(lane_id, pts, is_intersection, turn)]
    out = []
    for k, start in enumerate(range(0, len(pts) - 1, SEGMENT_VECTORS)):
        seg = pts[start : start + SEGMENT_VECTORS + 1]
        out.append(LaneSegment(f"{lane_id}.{k}", seg, is_intersection, turn))
    return out


# ---------------------------------------------------------------- layouts


@dataclass
class Route:
    name: str
    path: Path2D
    approach: str
    movement: str  # straight | left | right
    entry_s: float | None = None  # arc length of the intersection entry


@dataclass
class Layout:
    kind: str
    lanes: list[LaneSegment]
    routes: list[Route]

    def routes_for(self, approach: str | None = None, movement: str | None = None) -> list[Route]:
        return [
            r for r in self.routes
            if (approach is None or r.approach == approach) and (movement is None or r.movement == movement)
        ]


def _straight_layout() -> Layout:
    lanes, routes = [], []
    for name, y, heading in (("e0", -1.75, 1), ("e1", -5.25, 1), ("w0", 1.75, -1), ("w1", 5.25, -1)):
        p = line((-150.0 * heading, y), (150.0 * heading, y))
        lanes += chop(p, name)
        routes.append(Route(name, p, name[0], "straight"))
    return Layout("straight", lanes, routes)


def _curve_layout() -> Layout:
    radius = 40.0
    ref = line((-100.0, 0.0), (0.0, 0.0)) + arc((0.0, radius), radius, -math.pi / 2, 0.0) + line((radius, radius), (radius, 140.0))
    lanes, routes = [], []
    for name, off in (("f0", -1.75), ("f1", -5.25)):
        p = offset_path(ref, off)
        lanes += chop(p, name)
        routes.append(Route(name, p, "f", "straight"))
    back = Path2D(offset_path(ref, 1.75).points[::-1])
    lanes += chop(back, "b0")
    routes.append(Route("b0", back, "b", "straight"))
    return Layout("curve", lanes, routes)


_HEADINGS = {"e": 0.0, "n": math.pi / 2, "w": math.pi, "s": -math.pi / 2}
_TURN = {"left": math.pi / 2, "right": -math.pi / 2, "straight": 0.0}


def _unit(phi: float) -> np.ndarray:
    return np.array([math.cos(phi), math.sin(phi)])


def _right(phi: float) -> np.ndarray:
    return np.array([math.sin(phi), -math.cos(phi)])


def _heading_name(phi: float) -> str:
    best = min(_HEADINGS, key=lambda k: abs(math.remainder(_HEADINGS[k] - phi, 2 * math.pi)))
    return best


def _intersection_layout(approaches: tuple[str, ...], movements: dict[str, tuple[str, ...]], kind: str) -> Layout:
    """Approach names are travel headings (e = eastbound, i.e. arriving from the west)."""
    half = LANE_WIDTH / 2
    far = STOP_LINE + ARM_LENGTH
    lanes: list[LaneSegment] = []
    in_paths, out_paths = {}, {}
    exits = {_heading_name(_HEADINGS[a] + _TURN[m]) for a in approaches for m in movements[a]}
    for a in approaches:
        phi = _HEADINGS[a]
        in_paths[a] = line(-far * _unit(phi) + half * _right(phi), -STOP_LINE * _unit(phi) + half * _right(phi))
        lanes += chop(in_paths[a], f"in_{a}")
    for x in sorted(exits):
        phi = _HEADINGS[x]
        out_paths[x] = line(STOP_LINE * _unit(phi) + half * _right(phi), far * _unit(phi) + half * _right(phi))
        lanes += chop(out_paths[x], f"out_{x}")
    routes = []
    for a in approaches:
        phi = _HEADINGS[a]
        for m in movements[a]:
            psi = phi + _TURN[m]
            x = _heading_name(psi)
            p0 = in_paths[a].points[-1]
            p1 = out_paths[x].points[0]
            if m == "straight":
                conn = line(p0, p1)
            else:
                # corner where the two lane lines cross
                A = np.stack([_unit(phi), -_unit(psi)], axis=1)
                lam = np.linalg.solve(A, p1 - p0)
                conn = bezier(p0, p0 + lam[0] * _unit(phi), p1)
            lanes += chop(conn, f"x_{a}_{m}", True, "none" if m == "straight" else m, single=True)
            path = in_paths[a] + conn + out_paths[x]
            routes.append(Route(f"{a}_{m}", path, a, m, entry_s=in_paths[a].length))
    return Layout(kind, lanes, routes)


def build_layout(kind: str) -> Layout:
    if kind == "straight":
        return _straight_layout()
    if kind == "curve":
        return _curve_layout()
    if kind == "t_intersection":
        # stem road arrives from the south (northbound approach "n")
        return _intersection_layout(
            ("e", "w", "n"), {"e": ("straight", "right"), "w": ("straight", "left"), "n": ("left", "right")}, kind
        )
    if kind == "four_way":
        moves = ("straight", "left", "right")
        return _intersection_layout(("e", "n", "w", "s"), {a: moves for a in "enws"}, kind)
    raise TemplateError(f"unknown layout {kind!r}")


# ---------------------------------------------------------------- kinematics


@dataclass
class KinematicProfile:
    s0: float
    v0: float
    accel: list[tuple[int, float]]  # (start step, acceleration) pieces, sorted by step
    route: str
    lane_path: tuple[str, ...] = ()
    yield_stop_s: float | None = None  # brake to a stop before this arc length
    yield_decel: float = 3.0
    v_max: float = 16.0

    def integrate(self, n_steps: int = N_STEPS, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
        """Arc length and speed per step; speed is clamped to [0, v_max]."""
        s = np.empty(n_steps)
        v = np.empty(n_steps)
        s[0], v[0] = self.s0, self.v0
        braking = None
        pieces = sorted(self.accel)
        for k in range(n_steps - 1):
            a = 0.0
            for start, acc in pieces:
                if k >= start:
                    a = acc
            if self.yield_stop_s is not None:
                remaining = self.yield_stop_s - s[k]
                if braking is None and v[k] > 0 and remaining <= v[k] ** 2 / (2 * self.yield_decel):
                    braking = v[k] ** 2 / (2 * max(remaining, 1e-3))
                if braking is not None:
                    a = -braking
            v_next = min(max(v[k] + a * dt, 0.0), self.v_max)
            if braking is None and self.yield_stop_s is None and not pieces:
                s[k + 1] = self.s0 + (k + 1) * self.v0 * dt
            else:
                s[k + 1] = s[k] + 0.5 * (v[k] + v_next) * dt
            v[k + 1] = v_next
        return s, v


# ---------------------------------------------------------------- templates


@dataclass(frozen=True)
class ScenarioTemplate:
    name: str
    layout: str
    behaviors: tuple[str, ...]  # first entry is the agent of interest
    speed_range: tuple[float, float] = (6.0, 12.0)

    def validate(self) -> None:
        if self.layout not in LAYOUTS:
            raise TemplateError(f"{self.name}: unknown layout {self.layout!r}")
        if not 1 <= len(self.behaviors) <= 8:
            raise TemplateError(f"{self.name}: agent count must be in 1..8")
        for b in self.behaviors:
            if b not in BEHAVIORS:
                raise TemplateError(f"{self.name}: unknown behavior {b!r}")
            if b in ("turn_left", "turn_right", "decelerate_yield") and self.layout in ("straight", "curve"):
                raise TemplateError(f"{self.name}: behavior {b!r} needs an intersection layout, got {self.layout!r}")
        if self.speed_range[0] <= 0 or self.speed_range[0] > self.speed_range[1]:
            raise TemplateError(f"{self.name}: bad speed range {self.speed_range}")


TEMPLATES: dict[str, ScenarioTemplate] = {
    t.name: t
    for t in (
        ScenarioTemplate("straight_cruise", "straight", ("constant_speed", "constant_speed", "lane_follow", "constant_speed")),
        ScenarioTemplate("straight_accelerate", "straight", ("accelerate", "constant_speed", "lane_follow")),
        ScenarioTemplate("curve_follow", "curve", ("lane_follow", "constant_speed", "constant_speed")),
        ScenarioTemplate("t_yield", "t_intersection", ("decelerate_yield", "constant_speed", "lane_follow"), (6.0, 11.0)),
        ScenarioTemplate("t_turn_left", "t_intersection", ("turn_left", "constant_speed", "constant_speed"), (5.0, 9.0)),
        ScenarioTemplate("t_turn_right", "t_intersection", ("turn_right", "constant_speed"), (5.0, 9.0)),
        ScenarioTemplate("four_way_yield", "four_way", ("decelerate_yield", "constant_speed", "constant_speed", "lane_follow"), (6.0, 11.0)),
        ScenarioTemplate("four_way_straight", "four_way", ("lane_follow", "constant_speed", "turn_left"), (5.0, 9.0)),
        ScenarioTemplate("four_way_turn_left", "four_way", ("turn_left", "constant_speed", "lane_follow"), (5.0, 9.0)),
        ScenarioTemplate("four_way_turn_right", "four_way", ("turn_right", "constant_speed", "constant_speed"), (5.0, 9.0)),
    )
}

INTERACTION_SUITE = ("t_yield", "four_way_yield", "t_turn_left", "t_turn_right", "four_way_turn_left", "four_way_turn_right", "four_way_straight")


def _movement_for(behavior: str, rng) -> str:
    if behavior == "turn_left":
        return "left"
    if behavior == "turn_right":
        return "right"
    return "straight"


def _accel_pieces(behavior: str, rng) -> list[tuple[int, float]]:
    if behavior == "accelerate":
        return [(int(rng.integers(0, 25)), float(rng.uniform(1.0, 2.5)))]
    if behavior == "lane_follow":
        return [(k, float(rng.uniform(-0.8, 0.8))) for k in range(0, N_STEPS, 10)]
    return []


def _lane_ids_on(route: Route, layout: Layout) -> tuple[str, ...]:
    pts = route.path.resample(4.0)
    ids = []
    for lane in layout.lanes:
        d = np.min(np.linalg.norm(lane.centerline[:, None, :] - pts[None, :, :], axis=-1))
        if d < 0.5:
            ids.append(lane.lane_id)
    return tuple(ids)


def _aoi_profile(template: ScenarioTemplate, layout: Layout, rng) -> tuple[Route, KinematicProfile]:
    b = template.behaviors[0]
    v = float(rng.uniform(*template.speed_range))
    if layout.kind in ("straight", "curve"):
        route = layout.routes[0] if layout.kind == "curve" else layout.routes[int(rng.integers(0, 2))]
        s0 = float(rng.uniform(40.0, 110.0)) if layout.kind == "curve" else float(rng.uniform(60.0, 110.0))
        return route, KinematicProfile(s0, v, _accel_pieces(b, rng), route.name)
    approach = str(rng.choice(sorted({r.approach for r in layout.routes_for(movement=_movement_for(b, rng))})))
    route = layout.routes_for(approach, _movement_for(b, rng))[0]
    # distance to the entry at the last observed step
    if b == "decelerate_yield":
        gap = float(rng.uniform(8.0, 30.0))
        s19 = route.entry_s - gap
    else:
        s19 = route.entry_s - float(rng.uniform(2.0, 12.0))
    s0 = s19 - v * (T_OBS - 1) * DT
    return route, KinematicProfile(s0, v, _accel_pieces(b, rng), route.name)


def _lateral_endpoint_offset(xy: np.ndarray) -> float:
    last, prev = xy[T_OBS - 1], xy[T_OBS - 2]
    h = (last - prev) / np.linalg.norm(last - prev)
    rel = xy[-1] - last
    return abs(h[0] * rel[1] - h[1] * rel[0])


def _track(route: Route, prof: KinematicProfile, lateral: float, start_step: int) -> tuple[np.ndarray, np.ndarray]:
    s, _ = prof.integrate()
    s = np.clip(s, 0.0, route.path.length)
    xy = route.path.position(s) + lateral * route.path.left_normal(s)
    times = np.arange(start_step, N_STEPS)
    return times, xy[start_step:]


def gen_scene(template: ScenarioTemplate | str, seed: int) -> RawScene:
    """Generate one 50-step scene; the AoI's steps 20..49 form ``gt_future``."""
    return gen_scene_with_profiles(template, seed)[0]


def gen_scene_with_profiles(template: ScenarioTemplate | str, seed: int) -> tuple[RawScene, list[KinematicProfile]]:
    """Like :func:`gen_scene`, also returning each agent's kinematic profile (AoI first)."""
    if isinstance(template, str):
        if template not in TEMPLATES:
            raise TemplateError(f"unknown template {template!r}")
        template = TEMPLATES[template]
    template.validate()
    rng = np.random.default_rng(seed)
    layout = build_layout(template.layout)

    aoi_route, aoi_prof = _aoi_profile(template, layout, rng)
    aoi_lat = float(rng.uniform(-LATERAL_NOISE, LATERAL_NOISE))
    aoi_prof.lane_path = _lane_ids_on(aoi_route, layout)
    profiles: list[tuple[Route, KinematicProfile, float, int]] = []

    used_approaches = {aoi_route.approach}
    aoi_arrival = None
    if aoi_route.entry_s is not None:
        aoi_arrival = (aoi_route.entry_s - aoi_prof.s0) / aoi_prof.v0

    for i, b in enumerate(template.behaviors[1:], start=1):
        v = float(rng.uniform(*template.speed_range))
        lat = float(rng.uniform(-LATERAL_NOISE, LATERAL_NOISE))
        start_step = int(rng.integers(1, 8)) if rng.random() < 0.2 else 0
        if layout.kind in ("straight", "curve"):
            others = [r for r in layout.routes if r is not aoi_route] or layout.routes
            route = others[(i - 1) % len(others)]
            s0 = float(np.clip(aoi_prof.s0 + rng.uniform(-30.0, 30.0), 5.0, route.path.length - 100.0))
            if route.approach != aoi_route.approach:
                s0 = float(np.clip(route.path.length - aoi_prof.s0 - rng.uniform(-20.0, 60.0), 5.0, route.path.length - 100.0))
            prof = KinematicProfile(s0, v, _accel_pieces(b, rng), route.name)
        else:
            free = sorted({r.approach for r in layout.routes} - used_approaches) or sorted({r.approach for r in layout.routes})
            approach = str(rng.choice(free))
            used_approaches.add(approach)
            movement = _movement_for(b, rng)
            if not layout.routes_for(approach, movement):
                movement = str(rng.choice([r.movement for r in layout.routes_for(approach)]))
            route = layout.routes_for(approach, movement)[0]
            if i == 1 and aoi_arrival is not None:
                # conflicting agent reaches the entry shortly before or after the AoI
                arrival = max(0.5, aoi_arrival + float(rng.uniform(-2.5, 2.5)))
                s0 = max(0.0, route.entry_s - v * arrival)
            else:
                s0 = float(rng.uniform(0.0, route.path.length - 60.0))
            prof = KinematicProfile(s0, v, _accel_pieces(b, rng), route.name)
        prof.lane_path = _lane_ids_on(route, layout)
        profiles.append((route, prof, lat, start_step))

    if template.behaviors[0] == "decelerate_yield" and profiles:
        route_c, prof_c, _, _ = profiles[0]
        their_arrival = (route_c.entry_s - prof_c.s0) / prof_c.v0
        if route_c.approach != aoi_route.approach and their_arrival < aoi_arrival:
            aoi_prof.yield_stop_s = aoi_route.entry_s - 1.0
            aoi_prof.yield_decel = float(rng.uniform(2.5, 4.0))

    times, xy = _track(aoi_route, aoi_prof, aoi_lat, 0)
    if template.behaviors[0] in ("turn_left", "turn_right"):
        # pull the AoI forward until the turn visibly bends the future
        for _ in range(20):
            if _lateral_endpoint_offset(xy) >= 2.5:
                break
            aoi_prof.s0 += 1.5
            times, xy = _track(aoi_route, aoi_prof, aoi_lat, 0)
    agents = [AgentTrack("aoi", times, xy, True)]
    for i, (route, prof, lat, start_step) in enumerate(profiles, start=1):
        t_i, xy_i = _track(route, prof, lat, start_step)
        agents.append(AgentTrack(f"agent{i}", t_i, xy_i))

    scene = RawScene(f"{template.name}-{seed}", agents, layout.lanes, "aoi", xy[T_OBS:].copy())
    scene.validate()
    return scene, [aoi_prof] + [p[1] for p in profiles]


# ---------------------------------------------------------------- datasets


@dataclass
class Manifest:
    master_seed: int
    counts: dict[str, int]
    entries: list[dict] = field(default_factory=list)

    def ids(self, split: str | None = None) -> list[str]:
        return [e["scene_id"] for e in self.entries if split is None or e["split"] == split]

    def to_json(self) -> str:
        return json.dumps({"master_seed": self.master_seed, "counts": self.counts, "scenes": self.entries}, indent=1, sort_keys=True) + "\n"


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def gen_dataset(counts: dict[str, int], seed: int, out_dir: str | Path, val_fraction: float = 0.2) -> Manifest:
    """Write ``scenes/<id>.json`` records plus ``manifest.json`` with a seeded train/val split."""
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    try:
        scenes_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {scenes_dir}: {exc}") from exc
    plan = []
    for name in sorted(counts):
        if counts[name] < 0:
            raise TemplateError(f"negative count for template {name!r}")
        if name not in TEMPLATES:
            raise TemplateError(f"unknown template {name!r}")
        plan += [name] * counts[name]
    n = len(plan)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    val = set(order[:n_val].tolist())
    manifest = Manifest(seed, {k: int(v) for k, v in sorted(counts.items())})
    for i, name in enumerate(plan):
        s = scene_seed(seed, i)
        scene = gen_scene(name, s)
        scene.scene_id = f"{i:05d}-{name}"
        path = scenes_dir / f"{scene.scene_id}.json"
        try:
            write_scene(scene, path)
        except OSError as exc:
            raise OSError(f"cannot write scene record {path}: {exc}") from exc
        manifest.entries.append(
            {"scene_id": scene.scene_id, "template": name, "seed": s, "split": "val" if i in val else "train",
             "file": f"scenes/{scene.scene_id}.json"}
        )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(dataset_dir: str | Path) -> Manifest:
    path = Path(dataset_dir) / "manifest.json"
    raw = json.loads(path.read_text())
    return Manifest(raw["master_seed"], raw["counts"], raw["scenes"])


def load_scene(path: str | Path) -> RawScene:
    return read_scene(path)


def load_dataset(dataset_dir: str | Path, split: str | None = None) -> list[RawScene]:
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    return [load_scene(root / e["file"]) for e in manifest.entries if split is None or e["split"] == split]
