"""Synthetic world generator: parametric lane graphs and lane-consistent agents.

Scenes hold a lane graph, one target agent executing a sampled maneuver
(straight, turn, or lane change) plus straight-driving background agents,
all sampled at 10 Hz with additive Gaussian position noise. Every scene is
built in a canonical axis-aligned frame and then rigidly transformed, so
downstream code never sees privileged orientations. The maneuver mix is
configurable; the default mirrors the heavy straight-driving imbalance of
real trajectory datasets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import Polyline, arclength, point_at
from .lanegraph import LaneGraph, LaneSegment, chain_path, graph_from_dict, graph_to_dict

__all__ = [
    "ScenarioConfig",
    "Scene",
    "DatasetError",
    "generate_map",
    "generate_scene",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "MAP_FAMILIES",
    "DEFAULT_MANEUVER_MIX",
]

SCHEMA_VERSION = 1
LANE_WIDTH = 3.5
MAP_FAMILIES = ("corridor", "curve", "t_intersection", "y_intersection", "multilane")

# Imbalanced by default: straight keeps ~93% of the mass, turns and lane
# changes split the rest.
DEFAULT_MANEUVER_MIX = {
    "straight": 0.9275,
    "left_turn": 0.0382,
    "right_turn": 0.0231,
    "left_lane_change": 0.0053,
    "right_lane_change": 0.0059,
}

# Families able to host each maneuver; "auto" draws among these per scene.
COMPATIBLE_FAMILIES = {
    "straight": ("corridor", "curve", "t_intersection", "multilane"),
    "left_turn": ("t_intersection", "y_intersection"),
    "right_turn": ("t_intersection", "y_intersection"),
    "left_lane_change": ("multilane",),
    "right_lane_change": ("multilane",),
}


class DatasetError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    maneuver_mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MANEUVER_MIX))
    map_family: str = "auto"
    speed_range: tuple[float, float] = (6.0, 12.0)
    noise: float = 0.15
    n_agents: int = 3
    past_steps: int = 20
    future_steps: int = 30
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        total = math.fsum(self.maneuver_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"maneuver_mix must sum to 1, got {total}")
        unknown = set(self.maneuver_mix) - set(COMPATIBLE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown maneuver classes: {sorted(unknown)}")
        if any(p < 0 for p in self.maneuver_mix.values()):
            raise ValueError("maneuver_mix probabilities must be >= 0")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise ValueError(f"speed_range must be 0 < lo <= hi, got {self.speed_range}")
        if self.map_family != "auto":
            if self.map_family not in MAP_FAMILIES:
                raise ValueError(f"unknown map_family {self.map_family!r}")
            blocked = [
                m
                for m, p in self.maneuver_mix.items()
                if p > 0 and self.map_family not in COMPATIBLE_FAMILIES[m]
            ]
            if blocked:
                raise ValueError(
                    f"map_family {self.map_family!r} cannot host maneuvers {blocked}; "
                    "use 'auto' or zero their probabilities"
                )
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.past_steps < 2 or self.future_steps < 1:
            raise ValueError("past_steps must be >= 2 and future_steps >= 1")


class Scene:
    """One training/evaluation example; target agent is index ``target``."""

    def __init__(self, graph: LaneGraph, pasts, futures, target: int, label: str,
                 family: str, dt: float) -> None:
        self.graph = graph
        self.pasts = np.asarray(pasts, dtype=float)
        self.futures = np.asarray(futures, dtype=float)
        self.target = int(target)
        self.label = label
        self.family = family
        self.dt = float(dt)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.target == other.target
            and self.label == other.label
            and self.family == other.family
            and self.dt == other.dt
            and np.array_equal(self.pasts, other.pasts)
            and np.array_equal(self.futures, other.futures)
            and graph_to_dict(self.graph) == graph_to_dict(other.graph)
        )

    def __repr__(self) -> str:
        return f"Scene({self.label}, {self.family}, {self.pasts.shape[0]} agents)"


# ------------------------------------------------------------------- maps


def _line_points(p0, p1, spacing=5.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.hypot(*(p1 - p0)) / spacing)) + 1)
    return np.linspace(p0, p1, n)


def _arc_points(center, radius, a0, a1, spacing=2.0):
    length = abs(a1 - a0) * radius
    n = max(3, int(math.ceil(length / spacing)) + 1)
    theta = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)])


def _build_corridor(params, rng):
    length = params.get("length", 150.0)
    n_seg = params.get("segments", 3)
    xs = np.linspace(-60.0, -60.0 + length, n_seg + 1)
    segs = [
        LaneSegment(i, Polyline(_line_points((xs[i], 0), (xs[i + 1], 0))),
                    successors=(i + 1,) if i + 1 < n_seg else ())
        for i in range(n_seg)
    ]
    return segs, {"straight": list(range(n_seg))}


def _build_curve(params, rng):
    radius = params.get("radius", float(rng.uniform(100.0, 200.0)))
    turn = params.get("direction", int(rng.choice([-1, 1])))
    sweep = 110.0 / radius  # ~110 m of arc
    approach = LaneSegment(0, Polyline(_line_points((-60, 0), (0, 0))), successors=(1,))
    center = (0.0, turn * radius)
    a0 = -turn * math.pi / 2
    mid = a0 + turn * sweep / 2
    a1 = a0 + turn * sweep
    arc1 = LaneSegment(1, Polyline(_arc_points(center, radius, a0, mid)), successors=(2,))
    arc2 = LaneSegment(2, Polyline(_arc_points(center, radius, mid, a1)))
    return [approach, arc1, arc2], {"straight": [0, 1, 2]}


def _build_t_intersection(params, rng):
    r = params.get("turn_radius", 8.0)
    branches = params.get("branches", ("straight", "left", "right"))
    segs = [LaneSegment(0, Polyline(_line_points((-60, 0), (0, 0))), successors=())]
    routes = {}
    succ = []
    next_id = 1
    if "straight" in branches:
        segs.append(LaneSegment(next_id, Polyline(_line_points((0, 0), (15, 0))), successors=(next_id + 1,)))
        segs.append(LaneSegment(next_id + 1, Polyline(_line_points((15, 0), (70, 0)))))
        routes["straight"] = [0, next_id, next_id + 1]
        succ.append(next_id)
        next_id += 2
    if "left" in branches:
        segs.append(
            LaneSegment(next_id, Polyline(_arc_points((0, r), r, -math.pi / 2, 0.0)), successors=(next_id + 1,))
        )
        segs.append(LaneSegment(next_id + 1, Polyline(_line_points((r, r), (r, r + 55)))))
        routes["left"] = [0, next_id, next_id + 1]
        succ.append(next_id)
        next_id += 2
    if "right" in branches:
        segs.append(
            LaneSegment(next_id, Polyline(_arc_points((0, -r), r, math.pi / 2, 0.0)), successors=(next_id + 1,))
        )
        segs.append(LaneSegment(next_id + 1, Polyline(_line_points((r, -r), (r, -r - 55)))))
        routes["right"] = [0, next_id, next_id + 1]
        succ.append(next_id)
        next_id += 2
    segs[0] = LaneSegment(0, segs[0].centerline, successors=tuple(succ))
    return segs, routes


def _build_y_intersection(params, rng):
    r = params.get("turn_radius", 12.0)
    sweep = math.radians(params.get("branch_deg", 45.0))
    segs = [LaneSegment(0, Polyline(_line_points((-60, 0), (0, 0))), successors=(1, 3))]
    routes = {}
    for name, turn, base_id in (("left", 1.0, 1), ("right", -1.0, 3)):
        center = (0.0, turn * r)
        a0 = -turn * math.pi / 2
        a1 = a0 + turn * sweep
        arc_pts = _arc_points(center, r, a0, a1)
        end = arc_pts[-1]
        heading = np.array([math.cos(sweep), turn * math.sin(sweep)])
        out = end + heading * 55.0
        segs.append(LaneSegment(base_id, Polyline(arc_pts), successors=(base_id + 1,)))
        segs.append(LaneSegment(base_id + 1, Polyline(_line_points(end, out))))
        routes[name] = [0, base_id, base_id + 1]
    return segs, routes


def _build_multilane(params, rng):
    n_lanes = params.get("lanes", 3)
    segs = []
    routes = {}
    split = 15.0
    for lane in range(n_lanes):
        y = lane * LANE_WIDTH
        a, b = 2 * lane, 2 * lane + 1
        left_a = 2 * (lane + 1) if lane + 1 < n_lanes else None
        right_a = 2 * (lane - 1) if lane - 1 >= 0 else None
        segs.append(
            LaneSegment(
                a,
                Polyline(_line_points((-60, y), (split, y))),
                successors=(b,),
                left_neighbor=left_a,
                right_neighbor=right_a,
            )
        )
        segs.append(
            LaneSegment(
                b,
                Polyline(_line_points((split, y), (90, y))),
                successors=(),
                left_neighbor=left_a + 1 if left_a is not None else None,
                right_neighbor=right_a + 1 if right_a is not None else None,
            )
        )
        routes[f"lane{lane}"] = [a, b]
    return segs, routes


_BUILDERS = {
    "corridor": _build_corridor,
    "curve": _build_curve,
    "t_intersection": _build_t_intersection,
    "y_intersection": _build_y_intersection,
    "multilane": _build_multilane,
}


def generate_map(family: str, params: dict | None = None, seed: int = 0) -> LaneGraph:
    """Build one lane graph of the requested family in canonical coordinates."""
    if family not in _BUILDERS:
        raise ValueError(f"unknown map family {family!r}; known: {MAP_FAMILIES}")
    segs, _ = _BUILDERS[family](params or {}, np.random.default_rng(seed))
    return LaneGraph(segs)


# ------------------------------------------------------------------ scenes


def _transform(points: np.ndarray, rot: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return points @ rot.T + shift


def _sample_track(path: Polyline, s_cur: float, speed: float, cfg: ScenarioConfig):
    t_past = np.arange(-(cfg.past_steps - 1), 1) * cfg.dt
    t_future = np.arange(1, cfg.future_steps + 1) * cfg.dt
    past = np.array([point_at(path, s_cur + speed * t) for t in t_past])
    future = np.array([point_at(path, s_cur + speed * t) for t in t_future])
    return past, future


def _lane_change_track(y0: float, dy: float, x_cur: float, speed: float, cfg: ScenarioConfig, rng):
    t_past = np.arange(-(cfg.past_steps - 1), 1) * cfg.dt
    t_future = np.arange(1, cfg.future_steps + 1) * cfg.dt
    future_len = speed * cfg.future_steps * cfg.dt
    x_start = x_cur + float(rng.uniform(0.05, 0.15)) * future_len
    blend_len = 0.65 * future_len

    def y_of(x):
        u = np.clip((x - x_start) / blend_len, 0.0, 1.0)
        return y0 + dy * (3 * u**2 - 2 * u**3)

    xs_past = x_cur + speed * t_past
    xs_future = x_cur + speed * t_future
    past = np.column_stack([xs_past, np.full_like(xs_past, y0)])
    future = np.column_stack([xs_future, y_of(xs_future)])
    return past, future


def _feasible_window(total: float, speed: float, cfg: ScenarioConfig) -> tuple[float, float]:
    past_len = speed * cfg.dt * (cfg.past_steps - 1)
    future_len = speed * cfg.dt * cfg.future_steps
    lo, hi = past_len, total - future_len
    if hi <= lo:
        raise ValueError("path too short for the configured horizons")
    return lo, hi


def generate_scene(config: ScenarioConfig, index: int) -> Scene:
    """Deterministically generate scene ``index`` of a dataset."""
    rng = np.random.default_rng((config.seed, index))
    classes = sorted(config.maneuver_mix)
    probs = np.array([config.maneuver_mix[c] for c in classes])
    label = str(rng.choice(classes, p=probs / probs.sum()))

    if config.map_family == "auto":
        family = str(rng.choice(COMPATIBLE_FAMILIES[label]))
    else:
        family = config.map_family
    segs, routes = _BUILDERS[family]({}, rng)
    graph_canonical = LaneGraph(segs)

    speed = float(rng.uniform(*config.speed_range))
    pasts: list[np.ndarray] = []
    futures: list[np.ndarray] = []

    # target agent
    if label in ("left_lane_change", "right_lane_change"):
        lanes = sorted(routes)
        n_lanes = len(lanes)
        if label == "left_lane_change":
            lane_idx = int(rng.integers(0, n_lanes - 1))
            dy = LANE_WIDTH
        else:
            lane_idx = int(rng.integers(1, n_lanes))
            dy = -LANE_WIDTH
        y0 = lane_idx * LANE_WIDTH
        path = chain_path(graph_canonical, routes[f"lane{lane_idx}"])
        lo, hi = _feasible_window(arclength(path), speed, config)
        s_cur = float(rng.uniform(lo, hi))
        x_cur = float(point_at(path, s_cur)[0])
        past, future = _lane_change_track(y0, dy, x_cur, speed, config, rng)
    elif label in ("left_turn", "right_turn"):
        route = routes["left" if label == "left_turn" else "right"]
        path = chain_path(graph_canonical, route)
        junction = arclength(chain_path(graph_canonical, route[:1]))
        t_junction = float(rng.uniform(0.15, 0.4)) * config.future_steps * config.dt
        s_cur = junction - speed * t_junction
        past, future = _sample_track(path, s_cur, speed, config)
    else:
        if family == "multilane":
            route_name = f"lane{int(rng.integers(len(routes)))}"
        else:
            route_name = "straight"
        path = chain_path(graph_canonical, routes[route_name])
        lo, hi = _feasible_window(arclength(path), speed, config)
        s_cur = float(rng.uniform(lo, hi))
        past, future = _sample_track(path, s_cur, speed, config)
    pasts.append(past)
    futures.append(future)

    # background agents keep to a lane at their own speeds
    route_names = ["straight"] if "straight" in routes else sorted(routes)
    for _ in range(config.n_agents - 1):
        other_speed = float(rng.uniform(*config.speed_range))
        name = route_names[int(rng.integers(len(route_names)))]
        other_path = chain_path(graph_canonical, routes[name])
        lo, hi = _feasible_window(arclength(other_path), other_speed, config)
        s_other = float(rng.uniform(lo, hi))
        o_past, o_future = _sample_track(other_path, s_other, other_speed, config)
        pasts.append(o_past)
        futures.append(o_future)

    theta = float(rng.uniform(0.0, 2 * math.pi))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shift = rng.uniform(-100.0, 100.0, size=2)

    moved = [
        LaneSegment(
            s.id,
            Polyline(_transform(s.centerline.points, rot, shift)),
            successors=s.successors,
            left_neighbor=s.left_neighbor,
            right_neighbor=s.right_neighbor,
        )
        for s in segs
    ]
    pasts_arr = np.stack([_transform(p, rot, shift) for p in pasts])
    futures_arr = np.stack([_transform(f, rot, shift) for f in futures])
    if config.noise > 0:
        pasts_arr = pasts_arr + rng.normal(0.0, config.noise, size=pasts_arr.shape)
        futures_arr = futures_arr + rng.normal(0.0, config.noise, size=futures_arr.shape)

    return Scene(
        graph=LaneGraph(moved),
        pasts=pasts_arr,
        futures=futures_arr,
        target=0,
        label=label,
        family=family,
        dt=config.dt,
    )


def generate_dataset(config: ScenarioConfig, count: int) -> list[Scene]:
    return [generate_scene(config, i) for i in range(count)]


# ----------------------------------------------------------------- dataset io


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "family": scene.family,
        "label": scene.label,
        "target": scene.target,
        "dt": scene.dt,
        "graph": graph_to_dict(scene.graph),
        "agents": [
            {"past": scene.pasts[i].tolist(), "future": scene.futures[i].tolist()}
            for i in range(scene.pasts.shape[0])
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    try:
        graph = graph_from_dict(data["graph"])
        pasts = np.array([a["past"] for a in data["agents"]], dtype=float)
        futures = np.array([a["future"] for a in data["agents"]], dtype=float)
        return Scene(
            graph=graph,
            pasts=pasts,
            futures=futures,
            target=data["target"],
            label=data["label"],
            family=data["family"],
            dt=data["dt"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"invalid scene payload: {exc}") from exc


def write_dataset(scenes: Iterable[Scene], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Scene]:
    scenes = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: not valid JSON ({exc})") from exc
            except DatasetError as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return scenes
