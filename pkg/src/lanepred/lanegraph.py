"""Lane-graph data model and extraction of feasible reference lanes.

A reference lane is a chain of successor-connected lane segments, clipped to
start at the agent's projected position. Reference lanes act as pseudo
ground truth for the lane-based training loss and as anchors for the
lane-aware diversity metric.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import Polyline, arclength, point_at, project, tangent_at, truncate_by_arclength

__all__ = [
    "LaneSegment",
    "LaneGraph",
    "ReferenceLane",
    "nearby_segments",
    "expand_forward",
    "chain_path",
    "extract_reference_lanes",
    "resample_reference",
    "load_lane_graph",
    "save_lane_graph",
]

# Stand-in scoring weights for ranking candidate lanes: alignment with the
# agent's heading dominates, lateral offset penalizes per meter.
HEADING_WEIGHT = 1.0
DISTANCE_WEIGHT = 0.1
# Chord length used to measure a candidate lane's initial direction. A pure
# tangent at the clipped start cannot separate chains that share their first
# segment, so the direction is taken over this lookahead instead.
HEADING_LOOKAHEAD = 20.0
# Candidate lanes sharing more than this fraction of source segments count
# as overlapping; only the better-scoring one is kept.
OVERLAP_FRACTION = 0.5
DEFAULT_SEARCH_RADIUS = 10.0
MIN_FORWARD_LENGTH = 1.0


@dataclass(frozen=True)
class LaneSegment:
    """One lane centerline piece with its graph connectivity."""

    id: int
    centerline: Polyline
    successors: tuple[int, ...] = ()
    left_neighbor: int | None = None
    right_neighbor: int | None = None


@dataclass(frozen=True)
class ReferenceLane:
    """A successor-connected centerline path usable as pseudo ground truth."""

    path: Polyline
    source_ids: tuple[int, ...]
    score: float = 0.0


class LaneGraph:
    """Directed graph of lane segments keyed by id.

    Immutable after construction; all references are validated so lookups
    never dangle.
    """

    def __init__(self, segments: Iterable[LaneSegment]) -> None:
        self.segments: dict[int, LaneSegment] = {}
        for seg in segments:
            if seg.id in self.segments:
                raise ValueError(f"duplicate segment id {seg.id}")
            self.segments[seg.id] = seg
        for seg in self.segments.values():
            for ref in seg.successors:
                if ref not in self.segments:
                    raise ValueError(f"segment {seg.id} references missing successor {ref}")
            for ref in (seg.left_neighbor, seg.right_neighbor):
                if ref is not None and ref not in self.segments:
                    raise ValueError(f"segment {seg.id} references missing neighbor {ref}")

    def __len__(self) -> int:
        return len(self.segments)

    def __contains__(self, seg_id: int) -> bool:
        return seg_id in self.segments


def nearby_segments(g: LaneGraph, position, radius: float) -> list[int]:
    """Ids of segments whose centerline comes within ``radius`` of ``position``.

    Sorted ascending by distance, ties by id. Empty result is not an error.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    pos = np.asarray(position, dtype=float)
    hits: list[tuple[float, int]] = []
    for seg in g.segments.values():
        dist = abs(project(seg.centerline, pos).n)
        if dist <= radius:
            hits.append((dist, seg.id))
    hits.sort()
    return [seg_id for _, seg_id in hits]


def chain_path(g: LaneGraph, ids: Sequence[int]) -> Polyline:
    """Concatenate successor-linked centerlines into one path polyline."""
    pts = [g.segments[ids[0]].centerline.points]
    for sid in ids[1:]:
        nxt = g.segments[sid].centerline.points
        if np.array_equal(pts[-1][-1], nxt[0]):
            nxt = nxt[1:]
        pts.append(nxt)
    return Polyline(np.concatenate(pts, axis=0))


def expand_forward(g: LaneGraph, seed: int, horizon: float) -> list[ReferenceLane]:
    """Enumerate successor chains from ``seed`` until ``horizon`` meters or a dead end.

    One ReferenceLane per maximal chain, with the path clipped at ``horizon``.
    A chain that would revisit one of its own segments terminates at the
    revisit instead of looping.
    """
    if seed not in g.segments:
        raise KeyError(f"unknown seed segment {seed}")
    lanes: list[ReferenceLane] = []

    def walk(chain: list[int], length: float) -> None:
        if length >= horizon:
            _emit(chain)
            return
        nexts = [s for s in g.segments[chain[-1]].successors if s not in chain]
        if not nexts:
            _emit(chain)
            return
        for nxt in nexts:
            walk(chain + [nxt], length + arclength(g.segments[nxt].centerline))

    def _emit(chain: list[int]) -> None:
        path = chain_path(g, chain)
        total = arclength(path)
        if total > horizon:
            path = truncate_by_arclength(path, 0.0, horizon)
        lanes.append(ReferenceLane(path=path, source_ids=tuple(chain)))

    walk([seed], arclength(g.segments[seed].centerline))
    return lanes


def _heading_of(past: np.ndarray) -> np.ndarray:
    for i in range(past.shape[0] - 1, 0, -1):
        d = past[i] - past[i - 1]
        norm = math.hypot(d[0], d[1])
        if norm > 0:
            return d / norm
    raise ValueError("agent heading not derivable: all past points coincide")


def _score_candidate(lane: ReferenceLane, position: np.ndarray, heading: np.ndarray) -> float:
    look = min(HEADING_LOOKAHEAD, arclength(lane.path))
    chord = point_at(lane.path, look) - lane.path.points[0]
    norm = math.hypot(chord[0], chord[1])
    direction = chord / norm if norm > 0 else tangent_at(lane.path, 0.0)
    cos_align = float(direction[0] * heading[0] + direction[1] * heading[1])
    offset = abs(project(lane.path, position).n)
    return HEADING_WEIGHT * cos_align - DISTANCE_WEIGHT * offset


def _overlap_fraction(a: ReferenceLane, b: ReferenceLane) -> float:
    sa, sb = set(a.source_ids), set(b.source_ids)
    return len(sa & sb) / min(len(sa), len(sb))


def extract_reference_lanes(
    g: LaneGraph,
    past,
    l_max: int,
    horizon: float,
    search_radius: float = DEFAULT_SEARCH_RADIUS,
) -> list[ReferenceLane]:
    """Feasible reference lanes near the agent, best-scoring first.

    Candidates are grown forward from segments near the agent's current
    position (plus their lateral neighbors, to admit lane changes), clipped
    to start at the agent's projection, scored by heading alignment and
    lateral offset, and pruned so that no two returned lanes share more than
    half of their source segments. Returns an empty list when the agent is
    off-map; the caller decides whether lane-based terms are skipped.
    """
    if l_max < 1:
        raise ValueError(f"l_max must be >= 1, got {l_max}")
    past = np.asarray(past, dtype=float)
    if past.ndim != 2 or past.shape[0] < 2 or past.shape[1] != 2:
        raise ValueError(f"past must be (n >= 2, 2), got shape {past.shape}")
    position = past[-1]
    heading = _heading_of(past)

    near = nearby_segments(g, position, search_radius)
    if not near:
        return []
    seeds: list[int] = []
    for sid in near:
        if sid not in seeds:
            seeds.append(sid)
    for sid in near:
        seg = g.segments[sid]
        for nb in (seg.left_neighbor, seg.right_neighbor):
            if nb is not None and nb not in seeds:
                seeds.append(nb)

    candidates: list[ReferenceLane] = []
    for seed in seeds:
        budget = horizon + arclength(g.segments[seed].centerline)
        for lane in expand_forward(g, seed, budget):
            fc = project(lane.path, position)
            total = arclength(lane.path)
            if total - fc.s < MIN_FORWARD_LENGTH:
                continue
            end = min(total, fc.s + horizon)
            clipped = truncate_by_arclength(lane.path, fc.s, end) if fc.s > 0 or end < total else lane.path
            candidates.append(ReferenceLane(path=clipped, source_ids=lane.source_ids))

    scored = [
        ReferenceLane(path=c.path, source_ids=c.source_ids, score=_score_candidate(c, position, heading))
        for c in candidates
    ]
    scored.sort(key=lambda lane: (-lane.score, lane.source_ids))

    kept: list[ReferenceLane] = []
    for cand in scored:
        if all(_overlap_fraction(cand, k) <= OVERLAP_FRACTION for k in kept):
            kept.append(cand)
    return kept[:l_max]


def resample_reference(
    lane: ReferenceLane,
    t_f: int,
    speed: float,
    dt: float = 0.1,
    min_travel: float = 5.0,
) -> np.ndarray:
    """Resample a reference lane to one point per future time step.

    Assumes constant speed: the points sit at arc lengths ``k * D / t_f`` for
    ``k = 1..t_f`` where ``D = max(speed * t_f * dt, min_travel)``, clipped to
    the lane length (a short lane compresses the spacing and ends exactly at
    the lane end). The agent's own position at arc length 0 is excluded so
    point ``k`` aligns with prediction step ``k``.
    """
    if t_f < 1:
        raise ValueError(f"t_f must be >= 1, got {t_f}")
    total = arclength(lane.path)
    if total <= 0:
        raise ValueError("reference lane has zero length")
    travel = min(max(speed * t_f * dt, min_travel), total)
    targets = travel * np.arange(1, t_f + 1) / t_f
    cum = lane.path.cumulative_arclength
    xs = np.interp(targets, cum, lane.path.points[:, 0])
    ys = np.interp(targets, cum, lane.path.points[:, 1])
    return np.column_stack([xs, ys])


def _segment_to_dict(seg: LaneSegment) -> dict:
    return {
        "id": seg.id,
        "centerline": seg.centerline.points.tolist(),
        "successors": list(seg.successors),
        "left": seg.left_neighbor,
        "right": seg.right_neighbor,
    }


def graph_to_dict(g: LaneGraph) -> dict:
    return {"segments": [_segment_to_dict(g.segments[i]) for i in sorted(g.segments)]}


def graph_from_dict(data: dict) -> LaneGraph:
    if not isinstance(data, dict) or "segments" not in data:
        raise ValueError("lane graph JSON must be an object with a 'segments' list")
    segments = []
    for entry in data["segments"]:
        try:
            segments.append(
                LaneSegment(
                    id=int(entry["id"]),
                    centerline=Polyline(entry["centerline"]),
                    successors=tuple(int(s) for s in entry.get("successors", [])),
                    left_neighbor=entry.get("left"),
                    right_neighbor=entry.get("right"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"invalid lane segment entry {entry!r}: {exc}") from exc
    return LaneGraph(segments)


def save_lane_graph(g: LaneGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g), sort_keys=True), encoding="utf-8")


def load_lane_graph(path: str | Path) -> LaneGraph:
    return graph_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
