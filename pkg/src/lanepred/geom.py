"""Polyline geometry: arc length, resampling, and Frenet-frame projection.

All values are float64 meters. Polylines are immutable after construction,
so they are safe to share between threads.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

__all__ = [
    "Point2",
    "FrenetCoord",
    "Polyline",
    "arclength",
    "project",
    "resample",
    "truncate_by_arclength",
    "point_at",
    "tangent_at",
]


class Point2(NamedTuple):
    x: float
    y: float


class FrenetCoord(NamedTuple):
    """Arc-length position along a polyline plus signed lateral offset.

    ``n`` is positive on the left of the direction of travel and ``abs(n)``
    equals the Euclidean distance to the closest point on the polyline.
    """

    s: float
    n: float


class Polyline:
    """Piecewise-linear 2D path with a cached cumulative arc-length table.

    Consecutive duplicate points are dropped at construction; at least two
    distinct points must remain.
    """

    __slots__ = ("points", "cumulative_arclength", "_starts", "_dirs", "_lens")

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(
                f"polyline needs an (n, 2) array with n >= 2, got shape {pts.shape}"
            )
        if not np.isfinite(pts).all():
            raise ValueError("polyline coordinates must be finite")

        seg = np.diff(pts, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        if not (lens > 0.0).all():
            # Drop zero-length segments (exact consecutive duplicates).
            keep = np.concatenate([[True], lens > 0.0])
            pts = pts[keep]
            if pts.shape[0] < 2:
                raise ValueError("polyline has fewer than 2 distinct points")
            seg = np.diff(pts, axis=0)
            lens = np.hypot(seg[:, 0], seg[:, 1])

        self.points = pts
        self._lens = lens
        self._starts = pts[:-1]
        self._dirs = seg / lens[:, None]
        self.cumulative_arclength = np.concatenate([[0.0], np.cumsum(lens)])
        for arr in (self.points, self.cumulative_arclength, self._starts, self._dirs, self._lens):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __repr__(self) -> str:
        return f"Polyline({len(self)} points, length={self.cumulative_arclength[-1]:.3f})"


def arclength(p: Polyline) -> float:
    """Total arc length of the polyline."""
    return float(p.cumulative_arclength[-1])


def project(p: Polyline, q) -> FrenetCoord:
    """Project a point onto the polyline.

    Returns the arc-length coordinate ``s`` of the closest point and the
    signed offset ``n`` (positive left of travel direction). Exact ties
    between segments resolve to the smaller ``s``.
    """
    pt = np.asarray(q, dtype=np.float64)
    rel = pt - p._starts
    t = np.clip(rel[:, 0] * p._dirs[:, 0] + rel[:, 1] * p._dirs[:, 1], 0.0, p._lens)
    closest = p._starts + t[:, None] * p._dirs
    diff = pt - closest
    dist2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
    i = int(np.argmin(dist2))  # first minimum -> smaller s on ties
    dist = math.sqrt(dist2[i])
    cross = p._dirs[i, 0] * diff[i, 1] - p._dirs[i, 1] * diff[i, 0]
    n = 0.0 if dist == 0.0 else math.copysign(dist, cross) if cross != 0.0 else dist
    return FrenetCoord(s=float(p.cumulative_arclength[i] + t[i]), n=n)


def point_at(p: Polyline, s: float) -> np.ndarray:
    """Point on the polyline at arc length ``s`` (clamped to [0, length])."""
    cum = p.cumulative_arclength
    x = np.interp(s, cum, p.points[:, 0])
    y = np.interp(s, cum, p.points[:, 1])
    return np.array([x, y])


def tangent_at(p: Polyline, s: float) -> np.ndarray:
    """Unit direction of the segment containing arc length ``s``.

    At interior vertices the following segment is used; at the end, the last.
    """
    i = int(np.searchsorted(p.cumulative_arclength, s, side="right")) - 1
    i = min(max(i, 0), len(p._lens) - 1)
    return p._dirs[i].copy()


def resample(p: Polyline, count: int) -> Polyline:
    """Resample to ``count`` points equally spaced in arc length.

    First and last points coincide exactly with the originals; every output
    point lies on the input polyline.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    s = np.linspace(0.0, p.cumulative_arclength[-1], count)
    cum = p.cumulative_arclength
    pts = np.column_stack([np.interp(s, cum, p.points[:, 0]), np.interp(s, cum, p.points[:, 1])])
    pts[0] = p.points[0]
    pts[-1] = p.points[-1]
    out = Polyline(pts)
    if len(out) != count:
        raise ValueError("polyline folds back on itself; cannot resample to distinct points")
    return out


def truncate_by_arclength(p: Polyline, s0: float, s1: float) -> Polyline:
    """Sub-polyline covering arc lengths [s0, s1], with interpolated endpoints."""
    total = p.cumulative_arclength[-1]
    if not (0.0 <= s0 < s1 <= total + 1e-9):
        raise ValueError(f"need 0 <= s0 < s1 <= {total}, got s0={s0}, s1={s1}")
    s1 = min(s1, total)
    cum = p.cumulative_arclength
    inside = (cum > s0) & (cum < s1)
    pts = np.concatenate([[point_at(p, s0)], p.points[inside], [point_at(p, s1)]], axis=0)
    return Polyline(pts)
