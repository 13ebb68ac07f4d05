"""Evaluation metrics: displacement errors, lane-aware diversity, maneuver stats.

The lane-aware metric averages, over the reference lanes available to an
agent, the minimum final-point normal distance among the top-k scored
predictions. It is undefined (reported as absent, not zero) for agents with
no reference lanes; aggregation skips those agents and reports coverage.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .geom import project
from .lanegraph import LaneGraph, ReferenceLane, extract_reference_lanes

__all__ = [
    "min_ade",
    "min_fde",
    "min_lane_fde",
    "classify_maneuver",
    "maneuver_stats",
    "aggregate",
    "MANEUVER_CLASSES",
]

MANEUVER_CLASSES = ("straight", "left_turn", "right_turn", "left_lane_change", "right_lane_change")
TURN_CLASSES = ("left_turn", "right_turn")

# Classifier thresholds: heading change beyond TURN_DEG is a turn; otherwise a
# lateral offset beyond LC_OFFSET from the initial lane, with a neighbor lane
# available on that side, is a lane change.
TURN_DEG = 30.0
LC_OFFSET = 2.5
HEADING_CHORD = 8  # steps per chord when estimating start/end headings


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # highest scores first, ties by index
    return np.argsort(-scores, kind="stable")[:k]


def _check_k(pred, k: int) -> None:
    if not 1 <= k <= pred.modality_count:
        raise ValueError(f"k must be in [1, {pred.modality_count}], got {k}")


def min_ade(pred, gt, k: int) -> float:
    """Minimum over the top-k modalities of the mean pointwise error."""
    _check_k(pred, k)
    gt = np.asarray(gt, dtype=float)
    traj = pred.trajectory_values
    idx = _top_k(pred.score_values, k)
    errs = np.linalg.norm(traj[idx] - gt[None], axis=2).mean(axis=1)
    return float(errs.min())


def min_fde(pred, gt, k: int) -> float:
    """Minimum over the top-k modalities of the final-point error."""
    _check_k(pred, k)
    gt = np.asarray(gt, dtype=float)
    idx = _top_k(pred.score_values, k)
    errs = np.linalg.norm(pred.trajectory_values[idx, -1, :] - gt[-1], axis=1)
    return float(errs.min())


def min_lane_fde(pred, lanes: Sequence[ReferenceLane], k: int) -> float | None:
    """Mean over lanes of the minimum top-k final-point normal distance.

    Returns None when no lanes exist for the agent.
    """
    _check_k(pred, k)
    if not lanes:
        return None
    idx = _top_k(pred.score_values, k)
    finals = pred.trajectory_values[:, -1, :]
    per_lane = [
        min(abs(project(lane.path, finals[m]).n) for m in idx) for lane in lanes
    ]
    return math.fsum(per_lane) / len(per_lane)


def _chord_heading(points: np.ndarray, start: int, stop: int) -> float:
    d = points[stop] - points[start]
    return math.atan2(d[1], d[0])


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def classify_maneuver(
    graph: LaneGraph | None,
    past,
    future,
    turn_deg: float = TURN_DEG,
    lc_offset: float = LC_OFFSET,
) -> str:
    """Label a ground-truth future as straight, a turn, or a lane change.

    Heading change between the first and last future chords decides turns;
    otherwise lateral displacement from the best-aligned initial lane, with a
    neighbor lane available on that side, decides lane changes.
    """
    future = np.asarray(future, dtype=float)
    past = np.asarray(past, dtype=float)
    chord = min(HEADING_CHORD, future.shape[0] - 1)
    if chord < 1:
        return "straight"
    theta0 = _chord_heading(future, 0, chord)
    theta1 = _chord_heading(future, future.shape[0] - 1 - chord, future.shape[0] - 1)
    dtheta = _wrap_angle(theta1 - theta0)
    if abs(dtheta) > math.radians(turn_deg):
        return "left_turn" if dtheta > 0 else "right_turn"
    if graph is None:
        return "straight"
    lanes = extract_reference_lanes(graph, past, l_max=1, horizon=80.0)
    if not lanes:
        return "straight"
    lane = lanes[0]
    n = project(lane.path, future[-1]).n
    if abs(n) > lc_offset:
        side = "left" if n > 0 else "right"
        has_neighbor = any(
            (graph.segments[sid].left_neighbor if side == "left" else graph.segments[sid].right_neighbor)
            is not None
            for sid in lane.source_ids
        )
        if has_neighbor:
            return f"{side}_lane_change"
    return "straight"


def maneuver_stats(scenes: Iterable) -> dict[str, dict[str, float]]:
    """Classify each scene's target future and tabulate counts and percentages."""
    counts: Counter[str] = Counter()
    total = 0
    for scene in scenes:
        label = classify_maneuver(scene.graph, scene.pasts[scene.target], scene.futures[scene.target])
        counts[label] += 1
        total += 1
    return {
        cls: {
            "count": counts.get(cls, 0),
            "percent": 100.0 * counts.get(cls, 0) / total if total else 0.0,
        }
        for cls in MANEUVER_CLASSES
    }


def aggregate(records: Sequence[dict], subsets: dict[str, Sequence[str]] | None = None) -> dict:
    """Mean per metric over agents, with maneuver-keyed subset breakdowns.

    ``records`` holds one dict per agent: {"label": str, "metrics": {name:
    value-or-None}}. Absent values (None) are skipped; each metric reports how
    many agents contributed via ``count`` and the skipped remainder via
    ``missing``. Sums use math.fsum, so aggregation order cannot change the
    result.
    """
    if subsets is None:
        subsets = {"turn": list(TURN_CLASSES)}
    metric_names: list[str] = []
    for rec in records:
        for name in rec["metrics"]:
            if name not in metric_names:
                metric_names.append(name)

    def summarize(recs: Sequence[dict], name: str) -> dict:
        vals = [r["metrics"][name] for r in recs if r["metrics"].get(name) is not None]
        return {
            "mean": math.fsum(vals) / len(vals) if vals else None,
            "count": len(vals),
            "missing": sum(1 for r in recs if r["metrics"].get(name) is None),
        }

    report: dict = {}
    for name in metric_names:
        entry = summarize(records, name)
        entry["subsets"] = {
            sub_name: summarize([r for r in records if r["label"] in labels], name)
            for sub_name, labels in subsets.items()
        }
        report[name] = entry
    return report
