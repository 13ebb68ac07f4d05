"""Differentiable training objectives for multimodal trajectory prediction.

The regression target combines a winner-takes-all term with a lane term:
the modality whose final point lands closest to the ground truth is pulled
onto the ground truth, while for each reference lane the closest remaining
modality (by final-point normal distance to the lane) is pulled onto the
lane's resampled point matrix. Winner selections are hard assignments;
gradients flow only through the selected branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geom import Polyline, project

__all__ = [
    "NonFiniteError",
    "PredictionSet",
    "LossWeights",
    "wta_loss",
    "lane_loss",
    "score_loss",
    "regression_loss",
    "total_loss",
    "SMOOTH_L1_BETA",
]

# Transition point of the smooth L1 penalty: quadratic below, linear above.
SMOOTH_L1_BETA = 1.0


class NonFiniteError(ValueError):
    """A trajectory or score stopped being finite."""


@dataclass
class LossWeights:
    """Weighting factors of the combined objective plus the score margin."""

    alpha_score: float = 1.0
    alpha_pred: float = 1.0
    alpha_prop: float = 0.1
    epsilon_margin: float = 0.2

    def __post_init__(self) -> None:
        for name in ("alpha_score", "alpha_pred", "alpha_prop", "epsilon_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


class PredictionSet:
    """M candidate trajectories (M, t_f, 2) with M confidence scores.

    Trajectories and scores may be autodiff tensors (model output) or plain
    arrays (evaluation); value views are exposed either way.
    """

    def __init__(self, trajectories, scores) -> None:
        self.trajectories = trajectories if isinstance(trajectories, ad.Tensor) else ad.constant(trajectories)
        self.scores = scores if isinstance(scores, ad.Tensor) else ad.constant(scores)
        t = self.trajectories.value
        s = self.scores.value
        if t.ndim != 3 or t.shape[2] != 2:
            raise ValueError(f"trajectories must be (M, t_f, 2), got {t.shape}")
        if s.shape != (t.shape[0],):
            raise ValueError(f"scores must be ({t.shape[0]},), got {s.shape}")
        if t.shape[0] < 1 or t.shape[1] < 1:
            raise ValueError("need at least one modality and one time step")
        if not np.isfinite(t).all() or not np.isfinite(s).all():
            raise NonFiniteError("trajectories and scores must be finite")

    @property
    def modality_count(self) -> int:
        return self.trajectories.value.shape[0]

    @property
    def horizon(self) -> int:
        return self.trajectories.value.shape[1]

    @property
    def trajectory_values(self) -> np.ndarray:
        return self.trajectories.value

    @property
    def score_values(self) -> np.ndarray:
        return self.scores.value


def _check_gt(pred: PredictionSet, gt) -> np.ndarray:
    gt = np.asarray(gt, dtype=float)
    if gt.shape != (pred.horizon, 2):
        raise ValueError(f"ground truth must be ({pred.horizon}, 2), got {gt.shape}")
    return gt


def wta_loss(pred: PredictionSet, gt) -> tuple[ad.Tensor, int]:
    """Winner-takes-all regression loss and the winning modality index.

    The winner minimizes the final-point Euclidean distance to the ground
    truth (ties to the smallest index); the loss is the smooth L1 between the
    winner's full trajectory and the ground truth, averaged over all t_f * 2
    elements.
    """
    gt = _check_gt(pred, gt)
    finals = pred.trajectory_values[:, -1, :]
    d = np.hypot(finals[:, 0] - gt[-1, 0], finals[:, 1] - gt[-1, 1])
    m_star = int(np.argmin(d))
    winner = pred.trajectories[m_star]
    loss = ad.reduce_mean(ad.smooth_l1(winner, ad.constant(gt), beta=SMOOTH_L1_BETA))
    return loss, m_star


def lane_loss(
    pred: PredictionSet,
    lanes: Sequence[np.ndarray],
    m_star: int,
    *,
    polylines: Sequence[Polyline] | None = None,
) -> tuple[ad.Tensor, list[int]]:
    """Pull non-winning modalities onto reference lanes; returns (loss, per-lane winners).

    For each lane, the modality (excluding ``m_star``) whose final point has
    the smallest normal distance to the lane polyline is regressed onto the
    lane's point matrix with smooth L1; the per-lane terms are summed and
    divided by the lane count, so callers simply add the result. One modality
    may win several lanes. With a single modality there is nothing to spread:
    the loss is zero and the empty winner list flags the condition.
    """
    m = pred.modality_count
    if not 0 <= m_star < m:
        raise IndexError(f"m_star {m_star} out of range for {m} modalities")
    if len(lanes) == 0:
        raise ValueError("lane_loss needs at least one reference lane")
    if m == 1:
        return ad.constant(0.0), []

    finals = pred.trajectory_values[:, -1, :]
    total: ad.Tensor | None = None
    winners: list[int] = []
    for lane_idx, lane in enumerate(lanes):
        lane = np.asarray(lane, dtype=float)
        if lane.shape != (pred.horizon, 2):
            raise ValueError(f"lane matrix must be ({pred.horizon}, 2), got {lane.shape}")
        poly = polylines[lane_idx] if polylines is not None else Polyline(lane)
        dists = np.array(
            [math.inf if i == m_star else abs(project(poly, finals[i]).n) for i in range(m)]
        )
        m_lane = int(np.argmin(dists))
        winners.append(m_lane)
        term = ad.reduce_mean(
            ad.smooth_l1(pred.trajectories[m_lane], ad.constant(lane), beta=SMOOTH_L1_BETA)
        )
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(lanes)), winners


def score_loss(scores, m_star: int, epsilon: float) -> ad.Tensor:
    """Hinge loss pushing the winner's score above every other by ``epsilon``."""
    scores = scores.scores if isinstance(scores, PredictionSet) else scores
    if not isinstance(scores, ad.Tensor):
        scores = ad.constant(scores)
    return ad.hinge(scores, winner=m_star, margin=epsilon)


def regression_loss(
    preds: Sequence[PredictionSet],
    gts: Sequence[np.ndarray],
    lanes_per_agent: Sequence[Sequence[np.ndarray]],
) -> ad.Tensor:
    """Scene-level regression loss: mean over agents of (WTA + lane term).

    Agents with no reference lanes fall back to the WTA term alone.
    """
    if not (len(preds) == len(gts) == len(lanes_per_agent)):
        raise ValueError("preds, gts and lanes_per_agent must have equal lengths")
    if not preds:
        raise ValueError("regression_loss needs at least one agent")
    total: ad.Tensor | None = None
    for pred, gt, lanes in zip(preds, gts, lanes_per_agent):
        term, m_star = wta_loss(pred, gt)
        if len(lanes) > 0 and pred.modality_count > 1:
            lane_term, _ = lane_loss(pred, lanes, m_star)
            term = ad.add(term, lane_term)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(preds))


def total_loss(score_part, pred_reg_part, prop_reg_part, weights: LossWeights) -> ad.Tensor:
    """Weighted sum of the scoring and the two regression parts."""
    parts = [
        ad.mul(_as_tensor(score_part), weights.alpha_score),
        ad.mul(_as_tensor(pred_reg_part), weights.alpha_pred),
        ad.mul(_as_tensor(prop_reg_part), weights.alpha_prop),
    ]
    return ad.add(ad.add(parts[0], parts[1]), parts[2])


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.constant(float(x))
