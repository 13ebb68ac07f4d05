"""Map-adaptive multimodal trajectory prediction.

A two-stage predictor that proposes candidate futures, fuses them into the
agent feature through attention, and is trained so that non-winning output
modes spread over feasible reference lanes extracted from a lane graph.
Includes lane-aware evaluation metrics, a synthetic scenario generator, and
a small reverse-mode autodiff engine that the model runs on.
"""
from .geom import FrenetCoord, Point2, Polyline, arclength, project, resample, truncate_by_arclength
from .lanegraph import LaneGraph, LaneSegment, ReferenceLane

__all__ = [
    "Point2",
    "FrenetCoord",
    "Polyline",
    "arclength",
    "project",
    "resample",
    "truncate_by_arclength",
    "LaneGraph",
    "LaneSegment",
    "ReferenceLane",
]
