import numpy as np
import pytest

from lanepred import autodiff as ad
from lanepred.geom import Polyline
from lanepred.losses import LossWeights, lane_loss, score_loss, total_loss, wta_loss
from lanepred.model import ModelConfig, SceneInput, TwoStageModel, make_scene_input


def mini_config(**overrides):
    base = dict(
        feature_width=8,
        proposal_count=2,
        modality_count=2,
        heads=2,
        past_steps=6,
        future_steps=3,
        proposal_embed=8,
        lane_points=4,
        norm_groups=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_scene(rng, n_agents=2, n_lanes=2, t_o=6):
    pasts = []
    for i in range(n_agents):
        start = rng.normal(size=2) * 5
        head = rng.normal(size=2)
        head = head / np.hypot(*head)
        pasts.append(start + np.arange(t_o)[:, None] * head * 0.9)
    lanes = [
        Polyline(np.column_stack([np.linspace(-20, 40, 8), np.full(8, -4.0 + 8.0 * j)]))
        for j in range(n_lanes)
    ]
    return make_scene_input(np.array(pasts), lanes, lane_points=4)


class TestShapes:
    def test_feature_extractor_single_agent(self):
        rng = np.random.default_rng(0)
        model = TwoStageModel(mini_config(), seed=1)
        scene = small_scene(rng, n_agents=1)
        h = model.feature_extractor(scene)
        assert h.value.shape == (1, 8)

    def test_forward_shapes(self):
        rng = np.random.default_rng(1)
        cfg = mini_config()
        model = TwoStageModel(cfg, seed=1)
        scene = small_scene(rng, n_agents=3)
        out = model.forward(scene)
        assert len(out.predictions) == 3
        for pred in out.predictions:
            assert pred.trajectory_values.shape == (2, 3, 2)
            assert pred.score_values.shape == (2,)
        assert out.proposals is not None
        for z in out.proposals:
            assert z.value.shape == (2, 3, 2)

    def test_tpa_off_drops_proposals_and_params(self):
        rng = np.random.default_rng(2)
        model = TwoStageModel(mini_config(use_proposal_attention=False), seed=1)
        out = model.forward(small_scene(rng))
        assert out.proposals is None
        assert not any(name.startswith(("prop_", "tpa")) for name in model.params)

    def test_scores_raw_and_finite(self):
        rng = np.random.default_rng(3)
        model = TwoStageModel(mini_config(), seed=7)
        out = model.forward(small_scene(rng))
        for pred in out.predictions:
            assert np.isfinite(pred.score_values).all()

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            mini_config(feature_width=9)  # not divisible by heads
        with pytest.raises(ValueError):
            mini_config(modality_count=0)


class TestStructuralProperties:
    def test_agent_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        model = TwoStageModel(mini_config(), seed=3)
        scene = small_scene(rng, n_agents=3)
        out = model.forward(scene)
        perm = [2, 0, 1]
        scene_p = SceneInput(
            pasts=scene.pasts[perm],
            currents=scene.currents[perm],
            lane_points=scene.lane_points,
            lane_mids=scene.lane_mids,
        )
        out_p = model.forward(scene_p)
        for i, j in enumerate(perm):
            np.testing.assert_allclose(
                out_p.predictions[i].trajectory_values,
                out.predictions[j].trajectory_values,
                atol=1e-12,
            )
            np.testing.assert_allclose(
                out_p.predictions[i].score_values, out.predictions[j].score_values, atol=1e-12
            )

    def test_distant_lanes_have_no_effect(self):
        rng = np.random.default_rng(5)
        model = TwoStageModel(mini_config(), seed=3)
        scene = small_scene(rng, n_agents=2, n_lanes=2)
        h_base = model.feature_extractor(scene).value
        far = np.column_stack([np.linspace(500, 560, 4), np.full(4, 500.0)])
        scene_far = SceneInput(
            pasts=scene.pasts,
            currents=scene.currents,
            lane_points=np.concatenate([scene.lane_points, far[None], far[None] + 30.0], axis=0),
            lane_mids=np.concatenate(
                [scene.lane_mids, far.mean(axis=0, keepdims=True), far.mean(axis=0, keepdims=True) + 30.0],
                axis=0,
            ),
        )
        h_far = model.feature_extractor(scene_far).value
        np.testing.assert_allclose(h_far, h_base, atol=1e-9)

    def test_distant_agent_has_no_effect_on_interaction(self):
        rng = np.random.default_rng(6)
        model = TwoStageModel(mini_config(use_proposal_attention=False), seed=3)
        scene = small_scene(rng, n_agents=1)
        out_solo = model.forward(scene).predictions[0].trajectory_values
        far_past = scene.pasts[0] + 1000.0
        scene_far = SceneInput(
            pasts=np.concatenate([scene.pasts, far_past[None]]),
            currents=np.stack([scene.currents[0], far_past[-1]]),
            lane_points=scene.lane_points,
            lane_mids=scene.lane_mids,
        )
        out_far = model.forward(scene_far).predictions[0].trajectory_values
        np.testing.assert_allclose(out_far, out_solo, atol=1e-9)

    def test_proposal_permutation_invariance_of_attention(self):
        """Reordering proposal embeddings must not change the fused feature."""
        rng = np.random.default_rng(7)
        model = TwoStageModel(mini_config(proposal_count=4), seed=9)
        h_fe = ad.constant(rng.normal(size=(1, 8)))
        g = rng.normal(size=(4, 8))
        att = model._attention("tpa", h_fe, ad.constant(g)).value
        for _ in range(5):
            perm = rng.permutation(4)
            att_p = model._attention("tpa", h_fe, ad.constant(g[perm])).value
            np.testing.assert_allclose(att_p, att, atol=1e-9)

    def test_single_key_attention_is_projected_value(self):
        model = TwoStageModel(mini_config(proposal_count=1), seed=11)
        rng = np.random.default_rng(8)
        g = rng.normal(size=(1, 8))
        q1 = ad.constant(rng.normal(size=(1, 8)))
        q2 = ad.constant(rng.normal(size=(1, 8)))
        a1 = model._attention("tpa", q1, ad.constant(g)).value
        a2 = model._attention("tpa", q2, ad.constant(g)).value
        np.testing.assert_allclose(a1, a2, atol=1e-12)
        p = model.params
        v = g @ p["tpa.v.w"].value + p["tpa.v.b"].value
        expect = v @ p["tpa.o.w"].value + p["tpa.o.b"].value
        np.testing.assert_allclose(a1, expect, atol=1e-12)

    def test_attention_weights_normalize(self):
        x = ad.constant(np.random.default_rng(0).normal(size=(3, 5)))
        w = ad.softmax(x)
        assert np.allclose(w.value.sum(axis=-1), 1.0)

    def test_zeroed_final_layer_gives_constant_proposals(self):
        rng = np.random.default_rng(9)
        model = TwoStageModel(mini_config(), seed=5)
        model.params["prop_head.l3.w"].value = np.zeros_like(model.params["prop_head.l3.w"].value)
        model.params["prop_head.l3.b"].value = np.zeros_like(model.params["prop_head.l3.b"].value)
        scene = small_scene(rng, n_agents=2)
        out = model.forward(scene)
        for i, z in enumerate(out.proposals):
            expect = np.broadcast_to(scene.currents[i], (2, 3, 2))
            np.testing.assert_allclose(z.value, expect, atol=1e-12)

    def test_identical_proposals_embed_identically(self):
        rng = np.random.default_rng(10)
        model = TwoStageModel(mini_config(), seed=5)
        rel = rng.normal(size=(1, 3, 2))
        two = ad.constant(np.concatenate([rel, rel], axis=0))
        emb = model._conv_encoder("prop_enc", ad.transpose(two, (0, 2, 1))).value
        np.testing.assert_allclose(emb[0], emb[1], atol=1e-12)

    def test_determinism_same_seed_same_output(self):
        rng = np.random.default_rng(11)
        scene = small_scene(rng, n_agents=2)
        out1 = TwoStageModel(mini_config(), seed=21).forward(scene)
        out2 = TwoStageModel(mini_config(), seed=21).forward(scene)
        for a, b in zip(out1.predictions, out2.predictions):
            assert np.array_equal(a.trajectory_values, b.trajectory_values)
            assert np.array_equal(a.score_values, b.score_values)

    def test_checkpoint_round_trip(self):
        rng = np.random.default_rng(12)
        model = TwoStageModel(mini_config(), seed=2)
        state = model.state_dict()
        other = TwoStageModel(mini_config(), seed=99)
        other.load_state(state)
        scene = small_scene(rng)
        a = model.forward(scene).predictions[0].trajectory_values
        b = other.forward(scene).predictions[0].trajectory_values
        assert np.array_equal(a, b)

    def test_load_state_rejects_mismatch(self):
        model = TwoStageModel(mini_config(), seed=2)
        state = model.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ValueError):
            model.load_state(state)


def scene_loss_for_fd(model, scene, gts, lanes):
    """Total loss (score + pred regression + prop regression), lanes shared."""
    weights = LossWeights()
    out = model.forward(scene)
    score_terms = []
    reg_terms = []
    prop_terms = []
    for i, pred in enumerate(out.predictions):
        wta_v, m_star = wta_loss(pred, gts[i])
        lane_v, _ = lane_loss(pred, lanes, m_star)
        reg_terms.append(ad.add(wta_v, lane_v))
        score_terms.append(score_loss(pred, m_star, weights.epsilon_margin))
        if out.proposals is not None:
            z = out.proposals[i]
            from lanepred.losses import PredictionSet

            zp = PredictionSet(z, ad.constant(np.zeros(z.value.shape[0])))
            p_wta, p_star = wta_loss(zp, gts[i])
            p_lane, _ = lane_loss(zp, lanes, p_star)
            prop_terms.append(ad.add(p_wta, p_lane))
    n = len(out.predictions)
    score_part = ad.mul(score_terms[0] if n == 1 else ad.add(score_terms[0], score_terms[1]), 1.0 / n)
    reg_part = ad.mul(reg_terms[0] if n == 1 else ad.add(reg_terms[0], reg_terms[1]), 1.0 / n)
    if prop_terms:
        prop_part = ad.mul(prop_terms[0] if n == 1 else ad.add(prop_terms[0], prop_terms[1]), 1.0 / n)
    else:
        prop_part = ad.constant(0.0)
    return total_loss(score_part, reg_part, prop_part, weights)


class TestFullModelGradients:
    def test_gradient_reaches_every_parameter_group(self):
        rng = np.random.default_rng(13)
        model = TwoStageModel(mini_config(), seed=31)
        scene = small_scene(rng, n_agents=1)
        gts = [scene.currents[0] + np.cumsum(np.full((3, 2), 0.7), axis=0)]
        lanes = [gts[0] + np.array([0.0, 2.0])]
        loss = scene_loss_for_fd(model, scene, gts, lanes)
        loss.backward()
        grads = model.gradient_arrays()
        prefixes = {name.split(".")[0] for name in grads}
        for prefix in prefixes:
            norm = sum(
                float(np.abs(g).sum()) for n, g in grads.items() if n.split(".")[0] == prefix
            )
            assert norm > 0, f"no gradient reached {prefix}"

    def test_full_finite_difference_sweep(self):
        """Every parameter of the miniature model against central differences."""
        rng = np.random.default_rng(14)
        model = TwoStageModel(mini_config(), seed=31)
        scene = small_scene(rng, n_agents=1)
        gts = [scene.currents[0] + np.cumsum(np.full((3, 2), 0.7), axis=0)]
        lanes = [gts[0] + np.array([0.0, 2.0])]

        loss = scene_loss_for_fd(model, scene, gts, lanes)
        loss.backward()
        grads = {k: v.copy() for k, v in model.gradient_arrays().items()}

        h = 1e-5
        worst = 0.0
        worst_name = None
        for name, tensor in model.params.items():
            arr = tensor.value
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                f_plus = float(scene_loss_for_fd(model, scene, gts, lanes).value)
                arr[idx] = orig - h
                f_minus = float(scene_loss_for_fd(model, scene, gts, lanes).value)
                arr[idx] = orig
                fd = (f_plus - f_minus) / (2 * h)
                got = grads[name][idx]
                err = abs(fd - got) / max(abs(fd), abs(got), 1e-4)
                if err > worst:
                    worst, worst_name = err, (name, idx)
        assert worst < 1e-3, f"worst relative error {worst} at {worst_name}"
