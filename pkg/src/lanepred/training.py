"""Training loop, scene preparation, evaluation records, and checkpoints.

Scenes are preprocessed once: per agent, the reference lanes near its
current position are extracted and resampled into per-step point matrices
for the lane term, with an estimated current speed setting the assumed
travel distance. Training then iterates seeded, shuffled batches, builds one
loss graph per batch (score + prediction regression + proposal regression),
backpropagates, and applies Adam. Everything downstream of the seeds is
deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geom import Polyline
from .lanegraph import ReferenceLane, extract_reference_lanes, resample_reference
from .losses import (
    LossWeights,
    NonFiniteError,
    PredictionSet,
    lane_loss,
    score_loss,
    total_loss,
    wta_loss,
)
from .metrics import aggregate, min_ade, min_fde, min_lane_fde
from .model import ModelConfig, SceneInput, TwoStageModel, make_scene_input
from .scenario import Scene

__all__ = [
    "LaneConfig",
    "TrainingConfig",
    "PreparedScene",
    "DivergenceError",
    "Trainer",
    "TrainResult",
    "prepare_scene",
    "prepare_scenes",
    "evaluate_model",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "lanepred-checkpoint/1"
SPEED_CHORD_STEPS = 5


@dataclass
class LaneConfig:
    max_lanes: int = 3
    search_radius: float = 10.0
    horizon: float = 80.0
    min_travel: float = 5.0


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay_epoch: int = 16
    lr_decay_factor: float = 0.1
    use_lane_loss: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 11

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning_rate and lr_decay_factor must be positive")


class DivergenceError(RuntimeError):
    """Raised when the batch loss stops being finite."""

    def __init__(self, epoch: int, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass
class PreparedScene:
    scene: Scene
    scene_input: SceneInput
    gts: np.ndarray                       # (N, t_f, 2)
    ref_lanes: list[list[ReferenceLane]]  # per agent
    lane_matrices: list[list[np.ndarray]]  # per agent, (t_f, 2) each
    lane_polys: list[list]                # Polyline per lane matrix, cached


def estimate_speed(past: np.ndarray, dt: float) -> float:
    steps = np.diff(past[-(SPEED_CHORD_STEPS + 1) :], axis=0)
    return float(np.hypot(steps[:, 0], steps[:, 1]).mean() / dt)


def prepare_scene(scene: Scene, lane_cfg: LaneConfig, model_cfg: ModelConfig) -> PreparedScene:
    segments = [scene.graph.segments[sid] for sid in sorted(scene.graph.segments)]
    scene_input = make_scene_input(
        scene.pasts, [seg.centerline for seg in segments], model_cfg.lane_points
    )
    ref_lanes: list[list[ReferenceLane]] = []
    lane_matrices: list[list[np.ndarray]] = []
    for i in range(scene.pasts.shape[0]):
        lanes = extract_reference_lanes(
            scene.graph,
            scene.pasts[i],
            l_max=lane_cfg.max_lanes,
            horizon=lane_cfg.horizon,
            search_radius=lane_cfg.search_radius,
        )
        speed = estimate_speed(scene.pasts[i], scene.dt)
        ref_lanes.append(lanes)
        lane_matrices.append(
            [
                resample_reference(
                    lane, model_cfg.future_steps, speed, dt=scene.dt, min_travel=lane_cfg.min_travel
                )
                for lane in lanes
            ]
        )
    lane_polys = [[Polyline(mat) for mat in mats] for mats in lane_matrices]
    return PreparedScene(
        scene=scene,
        scene_input=scene_input,
        gts=scene.futures,
        ref_lanes=ref_lanes,
        lane_matrices=lane_matrices,
        lane_polys=lane_polys,
    )


def prepare_scenes(scenes: Sequence[Scene], lane_cfg: LaneConfig, model_cfg: ModelConfig) -> list[PreparedScene]:
    return [prepare_scene(s, lane_cfg, model_cfg) for s in scenes]


def _mean(parts: list[ad.Tensor]) -> ad.Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.mul(total, 1.0 / len(parts))


def scene_loss_parts(
    model: TwoStageModel,
    prep: PreparedScene,
    weights: LossWeights,
    use_lane_loss: bool,
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Per-scene (score, prediction regression, proposal regression) losses.

    Each part is already averaged over the scene's agents; the lane term is
    skipped for agents with no reference lanes.
    """
    out = model.forward(prep.scene_input)
    score_parts: list[ad.Tensor] = []
    reg_parts: list[ad.Tensor] = []
    prop_parts: list[ad.Tensor] = []
    for i, pred in enumerate(out.predictions):
        wta_term, m_star = wta_loss(pred, prep.gts[i])
        reg = wta_term
        lanes = prep.lane_matrices[i]
        if use_lane_loss and lanes and pred.modality_count > 1:
            lane_term, _ = lane_loss(pred, lanes, m_star, polylines=prep.lane_polys[i])
            reg = ad.add(reg, lane_term)
        reg_parts.append(reg)
        score_parts.append(score_loss(pred, m_star, weights.epsilon_margin))
        if out.proposals is not None:
            z = PredictionSet(out.proposals[i], ad.constant(np.zeros(model.config.proposal_count)))
            p_wta, p_star = wta_loss(z, prep.gts[i])
            p_reg = p_wta
            if use_lane_loss and lanes and z.modality_count > 1:
                p_lane, _ = lane_loss(z, lanes, p_star, polylines=prep.lane_polys[i])
                p_reg = ad.add(p_reg, p_lane)
            prop_parts.append(p_reg)
    score_part = _mean(score_parts)
    reg_part = _mean(reg_parts)
    prop_part = _mean(prop_parts) if prop_parts else ad.constant(0.0)
    return score_part, reg_part, prop_part


@dataclass
class TrainResult:
    model: TwoStageModel
    adam_state: ad.AdamState
    epoch: int
    logs: list[dict]


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainingConfig, lane_cfg: LaneConfig):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.lane_cfg = lane_cfg

    def learning_rate_at(self, epoch: int) -> float:
        lr = self.train_cfg.learning_rate
        if epoch >= self.train_cfg.lr_decay_epoch:
            lr *= self.train_cfg.lr_decay_factor
        return lr

    def train(
        self,
        scenes: Sequence[Scene],
        model: TwoStageModel | None = None,
        adam_state: ad.AdamState | None = None,
        start_epoch: int = 0,
        log_fn: Callable[[dict], None] | None = None,
        prepared: Sequence[PreparedScene] | None = None,
    ) -> TrainResult:
        cfg = self.train_cfg
        if model is None:
            model = TwoStageModel(self.model_cfg, seed=cfg.seed)
        preps = list(prepared) if prepared is not None else prepare_scenes(scenes, self.lane_cfg, self.model_cfg)
        if not preps and cfg.epochs > start_epoch:
            raise ValueError("cannot train on an empty dataset")
        logs: list[dict] = []
        params = model.parameter_arrays()
        for epoch in range(start_epoch, cfg.epochs):
            lr = self.learning_rate_at(epoch)
            order = np.random.default_rng((cfg.seed, 1000 + epoch)).permutation(len(preps))
            epoch_parts = {"total": [], "score": [], "pred": [], "prop": []}
            for batch_index, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [preps[j] for j in order[lo : lo + cfg.batch_size]]
                score_parts, reg_parts, prop_parts = [], [], []
                try:
                    for prep in batch:
                        s, r, p = scene_loss_parts(model, prep, cfg.weights, cfg.use_lane_loss)
                        score_parts.append(s)
                        reg_parts.append(r)
                        prop_parts.append(p)
                except NonFiniteError:
                    raise DivergenceError(epoch, batch_index, float("nan")) from None
                score_b, reg_b, prop_b = _mean(score_parts), _mean(reg_parts), _mean(prop_parts)
                batch_loss = total_loss(score_b, reg_b, prop_b, cfg.weights)
                value = float(batch_loss.value)
                if not math.isfinite(value):
                    raise DivergenceError(epoch, batch_index, value)
                model.zero_grads()
                batch_loss.backward()
                adam_state = ad.adam_step(params, model.gradient_arrays(), adam_state, lr=lr)
                epoch_parts["total"].append(value)
                epoch_parts["score"].append(float(score_b.value))
                epoch_parts["pred"].append(float(reg_b.value))
                epoch_parts["prop"].append(float(prop_b.value))
            entry = {
                "epoch": epoch,
                "lr": lr,
                "total": math.fsum(epoch_parts["total"]) / len(epoch_parts["total"]),
                "score": math.fsum(epoch_parts["score"]) / len(epoch_parts["score"]),
                "pred": math.fsum(epoch_parts["pred"]) / len(epoch_parts["pred"]),
                "prop": math.fsum(epoch_parts["prop"]) / len(epoch_parts["prop"]),
            }
            logs.append(entry)
            if log_fn is not None:
                log_fn(entry)
        if adam_state is None:
            adam_state = ad.AdamState()
        return TrainResult(model=model, adam_state=adam_state, epoch=cfg.epochs, logs=logs)


# ------------------------------------------------------------------ evaluation


def evaluate_model(
    model: TwoStageModel,
    preps: Sequence[PreparedScene],
    k_values: Sequence[int] = (1, 6),
) -> dict:
    """Metric report over the target agents of the prepared scenes."""
    records = []
    for prep in preps:
        out = model.forward(prep.scene_input)
        t = prep.scene.target
        pred = out.predictions[t]
        metrics: dict[str, float | None] = {}
        for k in k_values:
            metrics[f"minADE_{k}"] = min_ade(pred, prep.gts[t], k)
            metrics[f"minFDE_{k}"] = min_fde(pred, prep.gts[t], k)
            metrics[f"minLaneFDE_{k}"] = min_lane_fde(pred, prep.ref_lanes[t], k)
        records.append({"label": prep.scene.label, "metrics": metrics})
    return aggregate(records)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(
    path: str | Path,
    model: TwoStageModel,
    adam_state: ad.AdamState,
    epoch: int,
    extra: dict | None = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": epoch,
        "model_config": asdict(model.config),
        "params": ad.params_to_jsonable(model.state_dict()),
        "adam": {
            "step": adam_state.step,
            "m": ad.params_to_jsonable(adam_state.m),
            "v": ad.params_to_jsonable(adam_state.v),
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[TwoStageModel, ad.AdamState, int, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    config = ModelConfig(**payload["model_config"])
    model = TwoStageModel(config, seed=0)
    model.load_state(ad.params_from_jsonable(payload["params"]))
    adam = ad.AdamState(
        step=payload["adam"]["step"],
        m=ad.params_from_jsonable(payload["adam"]["m"]),
        v=ad.params_from_jsonable(payload["adam"]["v"]),
    )
    return model, adam, payload["epoch"], payload.get("extra", {})
