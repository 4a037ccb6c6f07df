import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wstta import tensor_nn as tn
from wstta.adaptation import (AdaptationConfig, AdaptationError, AdaptationState,
                              INITIAL_MOMENTUM, PseudoLabel, adapt_step, build_O,
                              compute_wstta_loss, decay_momentum, image_level_loss,
                              image_level_prediction, instance_level_loss,
                              make_pseudo_label, multi_hot, roi_targets, total_loss,
                              update_bn_affine, update_bn_stats)
from wstta.boxes import Box
from wstta.detector import Detection, RawOutputs, build_model, forward_full
from wstta.rng import make_rng
from wstta.scenes import CATEGORIES
from ._oracles import image_level_prediction_naive, pseudo_filter_naive
from .conftest import MICRO_ARCH


def det(x1, y1, x2, y2, cat, score):
    return Detection(Box(x1, y1, x2, y2), cat, score)


def micro_image(seed=0):
    return np.random.default_rng(seed).random((1, 3, 8, 8))


class TestPseudoLabel:
    def test_spec_example(self):
        pred = [det(0, 0, 5, 5, 0, 0.9), det(10, 10, 15, 15, 1, 0.6),
                det(20, 20, 25, 25, 2, 0.85)]
        out = make_pseudo_label(pred, {0}, 0.8)
        assert out.entries == [(pred[0].box, 0)]

    def test_empty_weak_label(self):
        pred = [det(0, 0, 5, 5, 0, 0.99)]
        assert make_pseudo_label(pred, set(), 0.8).entries == []

    def test_threshold_inclusive(self):
        pred = [det(0, 0, 5, 5, 1, 0.8)]
        out = make_pseudo_label(pred, {1}, 0.8)
        assert len(out.entries) == 1

    def test_order_preserved(self):
        pred = [det(0, 0, 5, 5, 1, 0.81), det(1, 1, 6, 6, 1, 0.99),
                det(2, 2, 7, 7, 1, 0.9)]
        out = make_pseudo_label(pred, {1}, 0.8)
        assert [e[0] for e in out.entries] == [d.box for d in pred]

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 12))
        pred = [det(i, i, i + 5, i + 5, int(rng.integers(0, 3)), float(rng.random()))
                for i in range(n)]
        weak = {int(c) for c in rng.integers(0, 3, size=rng.integers(0, 4))}
        tau = float(rng.random())
        out = make_pseudo_label(pred, weak, tau)
        assert out.entries == pseudo_filter_naive(pred, weak, tau)
        assert all(c in weak for _, c in out.entries)


class TestMultiHot:
    def test_spec_triple(self):
        np.testing.assert_array_equal(multi_hot({0, 2}, 3), [1, 0, 1])

    def test_empty_and_full(self):
        np.testing.assert_array_equal(multi_hot(set(), 3), [0, 0, 0])
        np.testing.assert_array_equal(multi_hot({0, 1, 2}, 3), [1, 1, 1])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            multi_hot({3}, 3)


class TestBuildO:
    def test_hand_case(self):
        out = build_O(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([2.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[2.0, 0.0], [0.0, 0.0]])

    def test_tie_breaks_to_first_column(self):
        out = build_O(np.full((3, 4), 0.7), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data[:, 0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.data[:, 1:], np.zeros((3, 3)))

    def test_zero_objectness(self):
        out = build_O(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(4))
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(1)
        c = rng.normal(size=(5, 4))
        o = rng.normal(size=5)
        shifted = c.copy()
        shifted[2] += 3.7  # constant added to a whole row leaves argmax alone
        np.testing.assert_array_equal(build_O(c, o).data, build_O(shifted, o).data)


class TestImageLevelPrediction:
    def test_worked_example(self):
        zhat = image_level_prediction(np.array([[1.0, 0.0], [0.0, 1.0]]),
                                      np.array([2.0, 0.0]))
        np.testing.assert_allclose(zhat.data, [0.6760, 0.5000], atol=5e-5)

    def test_uniform_scores_give_uniform_presence(self):
        zhat = image_level_prediction(np.zeros((6, 3)), np.random.default_rng(0).normal(size=6))
        np.testing.assert_allclose(zhat.data, np.full(3, 1 / 3), atol=1e-12)

    def test_single_proposal_reduces_to_row_softmax(self):
        c = np.array([[2.0, -1.0, 0.5]])
        zhat = image_level_prediction(c, np.array([3.0]))
        expect = np.exp(c[0] - c[0].max())
        expect /= expect.sum()
        np.testing.assert_allclose(zhat.data, expect, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_naive_loops(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 17))
        l = int(rng.integers(1, 5))
        c = rng.normal(0, 3, size=(k, l))
        o = rng.normal(0, 3, size=k)
        zhat = image_level_prediction(c, o)
        np.testing.assert_allclose(zhat.data, image_level_prediction_naive(c, o),
                                   atol=1e-10)
        assert ((zhat.data > 0) & (zhat.data < 1 + 1e-12)).all()


class TestLosses:
    def test_image_loss_hand_case(self):
        loss = image_level_loss(tn.Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_total_loss_arithmetic(self):
        assert total_loss(1.0, 0.5, 0.1) == pytest.approx(1.05, abs=1e-15)
        assert total_loss(2.5, 99.0, 0.0) == 2.5

    def test_roi_targets_iou_rule(self):
        pseudo = PseudoLabel([(Box(0, 0, 10, 10), 2)])
        proposals = np.array([
            [0.0, 0.0, 10.0, 8.0],     # IoU 0.8 -> class 2
            [0.0, 0.0, 10.0, 4.0],     # IoU 0.4 -> background
            [30.0, 30.0, 40.0, 40.0],  # disjoint -> background
        ])
        out = roi_targets(proposals, pseudo, background_index=3)
        np.testing.assert_array_equal(out, [2, 3, 3])

    def test_empty_pseudo_closed_form(self, micro_model):
        k = 8
        raw = RawOutputs(
            proposal_logits=tn.Tensor(np.zeros(k)),
            proposal_boxes=np.tile([0.0, 0.0, 4.0, 4.0], (k, 1)) + np.arange(k)[:, None],
            proposal_indices=np.arange(k),
            class_logits=tn.Tensor(np.zeros((k, 4))),
            anchor_objectness=tn.Tensor(np.zeros(MICRO_ARCH.num_anchors)),
            anchor_deltas=tn.Tensor(np.zeros((MICRO_ARCH.num_anchors, 4))),
            bn_stats={},
        )
        loss = instance_level_loss(raw, PseudoLabel([]), micro_model, make_rng("t"))
        assert loss.item() == pytest.approx(np.log(2.0) + np.log(4.0), abs=1e-12)

    def test_saturated_logits_near_zero_loss(self, micro_model):
        anchors = micro_model.anchors
        pseudo = PseudoLabel([(Box(*anchors[0]), 1)])
        from wstta.boxes import assign_anchors, POSITIVE
        labels, _ = assign_anchors(anchors, pseudo.boxes_array())
        objectness = np.where(labels == POSITIVE, 20.0, -20.0)
        class_logits = np.zeros((2, 4))
        class_logits[0, 1] = 20.0   # proposal 0 sits on the pseudo box -> class 1
        class_logits[1, 3] = 20.0   # disjoint proposal -> background
        raw = RawOutputs(
            proposal_logits=tn.Tensor(objectness[:2]),
            proposal_boxes=np.array([anchors[0], [0.0, 0.0, 2.0, 2.0] ]),
            proposal_indices=np.arange(2),
            class_logits=tn.Tensor(class_logits),
            anchor_objectness=tn.Tensor(objectness),
            anchor_deltas=tn.Tensor(np.zeros((len(anchors), 4))),
            bn_stats={},
        )
        loss = instance_level_loss(raw, pseudo, micro_model, make_rng("t"))
        assert loss.item() < 1e-6


class TestMomentum:
    def test_spec_example(self):
        assert decay_momentum(0.1, 0.94, 0.005) == pytest.approx(0.099, abs=1e-15)

    def test_identity_schedule(self):
        assert decay_momentum(0.37, 1.0, 0.0) == 0.37

    def test_fixed_point(self):
        m = 0.1
        for _ in range(3000):
            m = decay_momentum(m, 0.94, 0.005)
        assert m == pytest.approx(0.005 / 0.06, abs=1e-12)

    def test_clamped_at_one(self):
        assert decay_momentum(1.0, 1.0, 0.5) == 1.0

    @given(st.floats(0.5, 0.999), st.floats(0.0, 0.01), st.integers(1, 200))
    @settings(max_examples=60, deadline=None)
    def test_closed_form(self, omega, delta, t):
        m = 0.1
        for _ in range(t):
            m = decay_momentum(m, omega, delta)
        fp = delta / (1 - omega)
        expect = min(omega ** t * (0.1 - fp) + fp, 1.0)
        assert m == pytest.approx(expect, abs=1e-12)


class TestBnUpdates:
    def test_stats_hand_case(self):
        layer = tn.BatchNormLayer.create(1)
        update_bn_stats(layer, np.array([2.0]), np.array([1.0]), 0.1)
        assert layer.running_mean[0] == pytest.approx(0.2, abs=1e-15)
        assert layer.running_var[0] == pytest.approx(0.9 + 0.1, abs=1e-15)

    def test_full_replacement_and_noop(self):
        layer = tn.BatchNormLayer.create(2)
        bm, bv = np.array([3.0, -1.0]), np.array([2.0, 5.0])
        update_bn_stats(layer, bm, bv, 1.0)
        np.testing.assert_array_equal(layer.running_mean, bm)
        np.testing.assert_array_equal(layer.running_var, bv)
        update_bn_stats(layer, np.zeros(2), np.ones(2), 0.0)
        np.testing.assert_array_equal(layer.running_mean, bm)
        np.testing.assert_array_equal(layer.running_var, bv)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_formula(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 8))
        layer = tn.BatchNormLayer.create(c)
        layer.running_mean = rng.normal(size=c)
        layer.running_var = rng.random(c)
        rm, rv = layer.running_mean.copy(), layer.running_var.copy()
        bm, bv = rng.normal(size=c), rng.random(c)
        m = float(rng.random())
        update_bn_stats(layer, bm, bv, m)
        np.testing.assert_allclose(layer.running_mean, (1 - m) * rm + m * bm, atol=1e-12)
        np.testing.assert_allclose(layer.running_var, (1 - m) * rv + m * bv, atol=1e-12)

    def test_affine_zero_step(self, micro_model):
        before = micro_model.state_digest()
        grads = {micro_model.bn_layers[0].gamma: np.ones(4)}
        update_bn_affine(micro_model, grads, 0.0)
        assert micro_model.state_digest() == before

    def test_affine_single_param(self):
        layer = tn.BatchNormLayer.create(1)
        model_stub = type("M", (), {"named_bn_layers": lambda self: {"bn0": layer}})()
        update_bn_affine(model_stub, {layer.gamma: np.array([2.0])}, 0.0001)
        assert layer.gamma.data[0] == pytest.approx(0.9998, abs=1e-15)


def _state(method, **kw):
    return AdaptationState(config=AdaptationConfig(method=method, **kw), seed=5)


class TestAdaptStep:
    def test_source_is_noop(self, micro_model):
        before = micro_model.state_digest()
        pred, report = adapt_step(micro_model, _state("source"), micro_image())
        assert micro_model.state_digest() == before
        assert report.loss_total is None

    def test_bn_stats_only_stats_change_at_fixed_momentum(self, micro_model):
        before = micro_model.state_digest()
        state = _state("bn_stats")
        _, report = adapt_step(micro_model, state, micro_image())
        after = micro_model.state_digest()
        changed = {k for k in before if before[k] != after[k]}
        assert changed == {"bn0.running_mean", "bn0.running_var",
                           "bn1.running_mean", "bn1.running_var",
                           "bn_roi.running_mean", "bn_roi.running_var"}
        assert report.momentum_used == INITIAL_MOMENTUM
        assert state.m == INITIAL_MOMENTUM  # fixed, not decayed

    def test_dua_decays_and_updates_stats(self, micro_model):
        before = micro_model.state_digest()
        state = _state("dua", omega=0.94, delta=0.005)
        _, report = adapt_step(micro_model, state, micro_image())
        after = micro_model.state_digest()
        changed = {k for k in before if before[k] != after[k]}
        assert all("running" in k for k in changed)
        assert report.momentum_used == pytest.approx(0.099, abs=1e-15)

    def test_wstta_requires_weak_label(self, micro_model):
        with pytest.raises(AdaptationError, match="weak label"):
            adapt_step(micro_model, _state("wstta"), micro_image())

    def test_wstta_zero_step_size_only_stats_change(self, micro_model):
        before = micro_model.state_digest()
        state = _state("wstta", lambda_=0.0)
        _, report = adapt_step(micro_model, state, micro_image(), weak={0, 1})
        after = micro_model.state_digest()
        changed = {k for k in before if before[k] != after[k]}
        assert changed == {"bn0.running_mean", "bn0.running_var",
                           "bn1.running_mean", "bn1.running_var",
                           "bn_roi.running_mean", "bn_roi.running_var"}
        assert report.loss_total is not None

    def test_wstta_touches_only_bn_slots(self, micro_model):
        before = micro_model.state_digest()
        state = _state("wstta")
        for i in range(5):
            adapt_step(micro_model, state, micro_image(i), weak={i % 3})
        after = micro_model.state_digest()
        changed = {k for k in before if before[k] != after[k]}
        assert changed
        assert all(k.startswith("bn") for k in changed)
        assert state.t == 5

    def test_report_loss_identity(self, micro_model):
        state = _state("wstta", alpha=0.1)
        _, report = adapt_step(micro_model, state, micro_image(), weak={0})
        assert report.loss_total == pytest.approx(
            total_loss(report.loss_instance, report.loss_image, 0.1), abs=1e-12)

    def test_deterministic_step_reports(self):
        def run():
            model = build_model(7, list(CATEGORIES), MICRO_ARCH)
            state = _state("wstta")
            reports = []
            for i in range(4):
                _, rep = adapt_step(model, state, micro_image(i), weak={0, 2})
                reports.append((rep.loss_total, rep.loss_instance, rep.loss_image,
                                rep.momentum_used, rep.pseudo_count))
            return reports, model.state_digest()

        r1, d1 = run()
        r2, d2 = run()
        assert r1 == r2
        assert d1 == d2

    def test_non_finite_loss_rolls_back(self, micro_model):
        micro_model.fc2_w.data = micro_model.fc2_w.data + np.nan
        bn_before = {k: v for k, v in micro_model.state_digest().items()
                     if k.startswith("bn")}
        state = _state("wstta")
        with pytest.raises(AdaptationError, match="non-finite"):
            adapt_step(micro_model, state, micro_image(), weak={0})
        bn_after = {k: v for k, v in micro_model.state_digest().items()
                    if k.startswith("bn")}
        assert bn_before == bn_after
        assert state.t == 0

    def test_prediction_is_pre_adaptation_output(self, micro_model):
        from wstta.detector import postprocess
        image = micro_image()
        raw = forward_full(micro_model, image, "eval")
        expected = postprocess(raw)
        pred, _ = adapt_step(micro_model, _state("wstta"), image, weak={0})
        assert [(d.category, d.score) for d in pred] == \
            [(d.category, d.score) for d in expected]


class TestWsttaGradients:
    def test_bn_gradients_match_finite_differences(self, micro_model):
        image = micro_image(3)
        weak = {0, 2}
        weak_vec = multi_hot(weak, 3)
        raw0 = forward_full(micro_model, image, "eval")
        from wstta.detector import postprocess
        pseudo = make_pseudo_label(postprocess(raw0), weak, 0.0)  # tau 0 keeps boxes
        micro_model.set_trainable("adapt")
        rng_key = ("fd", 1)

        base_raw = forward_full(micro_model, image, "adapt")
        fixed = (base_raw.proposal_indices, base_raw.proposal_boxes)

        def loss_value():
            total, *_ = compute_wstta_loss(micro_model, image, weak_vec, pseudo,
                                           make_rng(*rng_key), 0.1,
                                           fixed_proposals=fixed)
            return total.item()

        total, _, _, _, tape = compute_wstta_loss(micro_model, image, weak_vec, pseudo,
                                                  make_rng(*rng_key), 0.1,
                                                  fixed_proposals=fixed)
        grads = {p.name: g for p, g in tape.backward(total).items()}

        from ._oracles import finite_difference
        worst = 0.0
        for name, bn in micro_model.named_bn_layers().items():
            for pname, p in (("gamma", bn.gamma), ("beta", bn.beta)):
                fd = finite_difference(loss_value, p.data)
                an = grads[f"{name}.{pname}"]
                scale = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-6)
                worst = max(worst, (np.abs(fd - an) / scale).max())
        assert worst < 1e-4
