"""Desk-scale two-stage trajectory predictor.

Dataflow: compact feature extractor (temporal conv over each agent's past,
shared MLP over nearby lane centerlines, fused by cross-attention) -> first
prediction stage (trajectory proposals, proposal embeddings, multi-head
attention of the agent feature over its proposals) -> interaction stage
(agent-to-agent and agent-to-lane attention) -> prediction header emitting M
trajectories with raw confidence scores.

Trajectories are produced as per-step offsets and integrated from the
agent's current position, so outputs live in world coordinates. Attention
uses hard radius masks: anything outside a radius has exactly zero effect.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .losses import PredictionSet

__all__ = ["ModelConfig", "SceneInput", "ModelOutput", "TwoStageModel"]

# Relative coordinates are fed to encoders in decameters to keep activations
# and attention logits near unit scale at init.
INPUT_SCALE = 0.1


@dataclass
class ModelConfig:
    feature_width: int = 64
    proposal_count: int = 6
    modality_count: int = 6
    heads: int = 4
    past_steps: int = 20
    future_steps: int = 30
    use_proposal_attention: bool = True
    proposal_embed: int = 128
    lane_points: int = 10
    lane_radius: float = 30.0
    agent_radius: float = 50.0
    norm_groups: int = 4

    def __post_init__(self) -> None:
        if self.feature_width % self.heads != 0:
            raise ValueError(f"feature_width {self.feature_width} not divisible by heads {self.heads}")
        if self.feature_width % self.norm_groups != 0:
            raise ValueError(
                f"feature_width {self.feature_width} not divisible by norm_groups {self.norm_groups}"
            )
        if self.proposal_count < 1 or self.modality_count < 1:
            raise ValueError("proposal_count and modality_count must be >= 1")
        if self.past_steps < 2 or self.future_steps < 1:
            raise ValueError("past_steps must be >= 2 and future_steps >= 1")


@dataclass
class SceneInput:
    """Numpy bundle the model consumes; world coordinates throughout."""

    pasts: np.ndarray            # (N, t_o, 2)
    currents: np.ndarray         # (N, 2), last past point per agent
    lane_points: np.ndarray      # (S, P, 2) resampled segment centerlines
    lane_mids: np.ndarray        # (S, 2)


@dataclass
class ModelOutput:
    predictions: list[PredictionSet]
    proposals: list[ad.Tensor] | None   # per agent (k, t_f, 2), world frame


class TwoStageModel:
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        d = c.feature_width

        self._conv_encoder_params(rng, "hist_enc", out_width=d)
        self._linear(rng, "lane_mlp1", 2 * c.lane_points, d)
        self._linear(rng, "lane_mlp2", d, d)
        self._linear(rng, "fe_rel", 2, d)
        self._attention_params(rng, "fe_a2l", d_query=d, d_key=d)

        if c.use_proposal_attention:
            self._header_params(rng, "prop_head", d, c.proposal_count * c.future_steps * 2)
            self._conv_encoder_params(rng, "prop_enc", out_width=c.proposal_embed)
            self._attention_params(rng, "tpa", d_query=d, d_key=c.proposal_embed)
            self._linear(rng, "tpa_merge", 2 * d, d)

        self._linear(rng, "int_rel_a", 2, d)
        self._attention_params(rng, "int_a2a", d_query=d, d_key=d)
        self._linear(rng, "int_rel_l", 2, d)
        self._attention_params(rng, "int_a2l", d_query=d, d_key=d)

        self._header_params(rng, "pred_head", d, c.modality_count * c.future_steps * 2)
        self._header_params(rng, "score_head", d, c.modality_count)

    # ---------------------------------------------------------------- params

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.parameter(value)

    def _linear(self, rng, name: str, n_in: int, n_out: int, scale: float | None = None) -> None:
        s = scale if scale is not None else 1.0 / math.sqrt(n_in)
        self._add(f"{name}.w", rng.normal(0.0, s, size=(n_in, n_out)))
        self._add(f"{name}.b", np.zeros(n_out))

    def _conv_encoder_params(self, rng, prefix: str, out_width: int) -> None:
        # conv stack runs at feature width; only the output projection widens
        w = self.config.feature_width
        self._add(f"{prefix}.c1.w", rng.normal(0.0, 1.0 / math.sqrt(2 * 3), size=(w, 2, 3)))
        self._add(f"{prefix}.c1.b", np.zeros(w))
        self._add(f"{prefix}.c2.w", rng.normal(0.0, 1.0 / math.sqrt(w * 3), size=(w, w, 3)))
        self._add(f"{prefix}.c2.b", np.zeros(w))
        self._linear(rng, f"{prefix}.out", w, out_width)

    def _header_params(self, rng, prefix: str, d_in: int, d_out: int) -> None:
        hid = d_in
        self._linear(rng, f"{prefix}.l1", d_in, hid)
        self._add(f"{prefix}.gn1.g", np.ones(hid))
        self._add(f"{prefix}.gn1.b", np.zeros(hid))
        self._linear(rng, f"{prefix}.l2", hid, hid)
        self._add(f"{prefix}.gn2.g", np.ones(hid))
        self._add(f"{prefix}.gn2.b", np.zeros(hid))
        # small final init keeps initial outputs near the current position
        # while still separating the modalities
        self._linear(rng, f"{prefix}.l3", hid, d_out, scale=0.01)

    def _attention_params(self, rng, prefix: str, d_query: int, d_key: int) -> None:
        d = self.config.feature_width
        self._linear(rng, f"{prefix}.q", d_query, d)
        self._linear(rng, f"{prefix}.k", d_key, d)
        self._linear(rng, f"{prefix}.v", d_key, d)
        self._linear(rng, f"{prefix}.o", d, d)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value for name, t in self.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"checkpoint parameter names do not match model: {sorted(missing)}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.value.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {t.value.shape}")
            t.value = arr.copy()

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def gradient_arrays(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in self.params.items()
        }

    # --------------------------------------------------------------- blocks

    def _apply_linear(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        return ad.bias_add(ad.matmul(x, self.params[f"{prefix}.w"]), self.params[f"{prefix}.b"])

    def _conv_encoder(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        """(B, 2, T) relative tracks -> (B, out_width) pooled features."""
        p = self.params
        h = ad.relu(ad.conv1d(x, p[f"{prefix}.c1.w"], p[f"{prefix}.c1.b"], stride=1, padding=1))
        h = ad.relu(ad.conv1d(h, p[f"{prefix}.c2.w"], p[f"{prefix}.c2.b"], stride=2, padding=1))
        pooled = ad.reduce_mean(h, axis=2)
        return self._apply_linear(f"{prefix}.out", pooled)

    def _header(self, prefix: str, x: ad.Tensor) -> ad.Tensor:
        """Three linear layers; residual joins the first two, then ReLU + GroupNorm."""
        p = self.params
        groups = self.config.norm_groups
        a = ad.relu(
            ad.group_norm(self._apply_linear(f"{prefix}.l1", x), p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], groups)
        )
        b = ad.group_norm(
            self._apply_linear(f"{prefix}.l2", a), p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], groups
        )
        y = ad.relu(ad.add(a, b))
        return self._apply_linear(f"{prefix}.l3", y)

    def _attention(self, prefix: str, query: ad.Tensor, keys: ad.Tensor) -> ad.Tensor:
        """Multi-head attention of one (1, d_q) query over (L, d_k) keys.

        Heads run as the batch axis of one 3-D matmul pair; the head outputs
        concatenate back into (1, d) in head-major order.
        """
        heads = self.config.heads
        d = self.config.feature_width
        dh = d // heads
        q = self._apply_linear(f"{prefix}.q", query)
        k = self._apply_linear(f"{prefix}.k", keys)
        v = self._apply_linear(f"{prefix}.v", keys)
        qh = ad.reshape(q, (heads, 1, dh))
        kh = ad.transpose(ad.reshape(k, (-1, heads, dh)), (1, 2, 0))
        vh = ad.transpose(ad.reshape(v, (-1, heads, dh)), (1, 0, 2))
        weights = ad.softmax(ad.mul(ad.matmul(qh, kh), 1.0 / math.sqrt(dh)))
        return self._apply_linear(f"{prefix}.o", ad.reshape(ad.matmul(weights, vh), (1, d)))

    def _integrate(self, steps: ad.Tensor, currents: np.ndarray, per_agent: int) -> ad.Tensor:
        """(B, t_f, 2) step offsets -> world trajectories from each agent's position."""
        rel = ad.cumsum(steps, axis=1)
        t_f = self.config.future_steps
        origins = np.repeat(currents, per_agent, axis=0)[:, None, :]
        tile = np.broadcast_to(origins, (rel.value.shape[0], t_f, 2)).copy()
        return ad.add(rel, ad.constant(tile))

    # -------------------------------------------------------------- forward

    def _lane_features(self, scene: SceneInput) -> ad.Tensor | None:
        if scene.lane_points.shape[0] == 0:
            return None
        rel = (scene.lane_points - scene.lane_mids[:, None, :]) * INPUT_SCALE
        flat = ad.constant(rel.reshape(rel.shape[0], -1))
        h = ad.relu(self._apply_linear("lane_mlp1", flat))
        return self._apply_linear("lane_mlp2", h)

    def _attend_lanes(self, prefix: str, rel_prefix: str, queries: ad.Tensor,
                      lane_feats: ad.Tensor | None, scene: SceneInput) -> ad.Tensor:
        rows = []
        n = scene.currents.shape[0]
        for i in range(n):
            row = queries[i : i + 1]
            if lane_feats is not None:
                rel = scene.lane_mids - scene.currents[i]
                sel = np.flatnonzero(np.hypot(rel[:, 0], rel[:, 1]) <= self.config.lane_radius)
                if sel.size > 0:
                    rel_emb = self._apply_linear(rel_prefix, ad.constant(rel[sel] * INPUT_SCALE))
                    keys = ad.add(ad.take_rows(lane_feats, sel), rel_emb)
                    row = ad.add(row, self._attention(prefix, row, keys))
            rows.append(row)
        return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]

    def feature_extractor(self, scene: SceneInput, lane_feats: ad.Tensor | None = None) -> ad.Tensor:
        """Per-agent fused features, shape (N, d)."""
        rel_past = (scene.pasts - scene.currents[:, None, :]) * INPUT_SCALE
        tracks = ad.constant(np.transpose(rel_past, (0, 2, 1)))
        temporal = self._conv_encoder("hist_enc", tracks)
        if lane_feats is None:
            lane_feats = self._lane_features(scene)
        return self._attend_lanes("fe_a2l", "fe_rel", temporal, lane_feats, scene)

    def proposal_stage(self, h_fe: ad.Tensor, scene: SceneInput) -> tuple[ad.Tensor, ad.Tensor]:
        """Proposals (N*k, t_f, 2) in world frame and the fused feature (N, d)."""
        c = self.config
        n = scene.currents.shape[0]
        steps = ad.reshape(self._header("prop_head", h_fe), (n * c.proposal_count, c.future_steps, 2))
        rel = ad.cumsum(steps, axis=1)
        origins = np.repeat(scene.currents, c.proposal_count, axis=0)[:, None, :]
        tile = np.broadcast_to(origins, rel.value.shape).copy()
        proposals = ad.add(rel, ad.constant(tile))
        embeds = self._conv_encoder("prop_enc", ad.transpose(ad.mul(rel, INPUT_SCALE), (0, 2, 1)))
        rows = []
        for i in range(n):
            gi = embeds[i * c.proposal_count : (i + 1) * c.proposal_count]
            rows.append(self._attention("tpa", h_fe[i : i + 1], gi))
        h_mha = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        fused = ad.relu(self._apply_linear("tpa_merge", ad.concat([h_fe, h_mha], axis=1)))
        return proposals, fused

    def interaction_stage(self, h: ad.Tensor, scene: SceneInput,
                          lane_feats: ad.Tensor | None) -> ad.Tensor:
        n = scene.currents.shape[0]
        rows = []
        for i in range(n):
            rel = scene.currents - scene.currents[i]
            sel = np.flatnonzero(np.hypot(rel[:, 0], rel[:, 1]) <= self.config.agent_radius)
            rel_emb = self._apply_linear("int_rel_a", ad.constant(rel[sel] * INPUT_SCALE))
            keys = ad.add(ad.take_rows(h, sel), rel_emb)
            rows.append(ad.add(h[i : i + 1], self._attention("int_a2a", h[i : i + 1], keys)))
        h2 = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return self._attend_lanes("int_a2l", "int_rel_l", h2, lane_feats, scene)

    def prediction_header(self, refined: ad.Tensor, scene: SceneInput) -> list[PredictionSet]:
        c = self.config
        n = scene.currents.shape[0]
        steps = ad.reshape(self._header("pred_head", refined), (n * c.modality_count, c.future_steps, 2))
        world = self._integrate(steps, scene.currents, c.modality_count)
        scores = self._header("score_head", refined)
        out = []
        for i in range(n):
            traj = world[i * c.modality_count : (i + 1) * c.modality_count]
            out.append(PredictionSet(traj, scores[i]))
        return out

    def forward(self, scene: SceneInput) -> ModelOutput:
        c = self.config
        n = scene.currents.shape[0]
        lane_feats = self._lane_features(scene)
        h_fe = self.feature_extractor(scene, lane_feats)
        proposals_per_agent: list[ad.Tensor] | None = None
        if c.use_proposal_attention:
            proposals, h = self.proposal_stage(h_fe, scene)
            proposals_per_agent = [
                proposals[i * c.proposal_count : (i + 1) * c.proposal_count] for i in range(n)
            ]
        else:
            h = h_fe
        refined = self.interaction_stage(h, scene, lane_feats)
        predictions = self.prediction_header(refined, scene)
        return ModelOutput(predictions=predictions, proposals=proposals_per_agent)


def make_scene_input(pasts, lane_polylines: Sequence, lane_points: int) -> SceneInput:
    """Bundle raw past tracks and lane centerline polylines for the model."""
    from .geom import resample

    pasts = np.asarray(pasts, dtype=float)
    if pasts.ndim != 3 or pasts.shape[2] != 2:
        raise ValueError(f"pasts must be (N, t_o, 2), got {pasts.shape}")
    if lane_polylines:
        pts = np.stack([resample(p, lane_points).points for p in lane_polylines])
        mids = pts.mean(axis=1)
    else:
        pts = np.zeros((0, lane_points, 2))
        mids = np.zeros((0, 2))
    return SceneInput(pasts=pasts, currents=pasts[:, -1, :].copy(), lane_points=pts, lane_mids=mids)
