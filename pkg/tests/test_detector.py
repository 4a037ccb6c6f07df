import numpy as np
import pytest

from wstta import tensor_nn as tn
from wstta.detector import (CheckpointError, PretrainConfig, RawOutputs, build_model,
                            forward_full, load_checkpoint, postprocess, pretrain,
                            save_checkpoint)
from wstta.scenes import CATEGORIES, StreamConfig, render_frame
from .conftest import MICRO_ARCH


def _digest(model):
    return model.state_digest()


class TestBuildModel:
    def test_same_seed_bitwise_identical(self):
        a = build_model(5, list(CATEGORIES))
        b = build_model(5, list(CATEGORIES))
        assert _digest(a) == _digest(b)

    def test_different_seed_differs(self):
        a = build_model(5, list(CATEGORIES))
        b = build_model(6, list(CATEGORIES))
        assert _digest(a) != _digest(b)

    def test_fresh_bn_defaults(self, full_model):
        for bn in full_model.bn_layers:
            np.testing.assert_array_equal(bn.gamma.data, np.ones(bn.channels))
            np.testing.assert_array_equal(bn.beta.data, np.zeros(bn.channels))
            np.testing.assert_array_equal(bn.running_mean, np.zeros(bn.channels))
            np.testing.assert_array_equal(bn.running_var, np.ones(bn.channels))
            assert bn.momentum == 0.1

    def test_empty_categories_rejected(self):
        with pytest.raises(ValueError):
            build_model(0, [])

    def test_anchor_count(self, full_model):
        assert full_model.anchors.shape == (512, 4)
        assert full_model.arch.grid == 16


class TestForward:
    def test_fresh_forward_finite_with_proposals(self, full_model, frame):
        raw = forward_full(full_model, frame.image.reshape(1, 3, 64, 64), "eval")
        assert raw.proposal_boxes.shape[0] == full_model.arch.top_k
        assert raw.class_logits.shape == (64, 4)
        assert np.isfinite(raw.class_logits.data).all()
        assert np.isfinite(raw.anchor_objectness.data).all()

    def test_eval_is_pure_and_deterministic(self, full_model, frame):
        image = frame.image.reshape(1, 3, 64, 64)
        before = _digest(full_model)
        raw1 = forward_full(full_model, image, "eval")
        raw2 = forward_full(full_model, image, "eval")
        assert _digest(full_model) == before
        np.testing.assert_array_equal(raw1.class_logits.data, raw2.class_logits.data)
        np.testing.assert_array_equal(raw1.proposal_boxes, raw2.proposal_boxes)
        np.testing.assert_array_equal(raw1.anchor_objectness.data,
                                      raw2.anchor_objectness.data)

    def test_adapt_vs_eval_differ_when_stats_shifted(self, full_model, frame):
        image = frame.image.reshape(1, 3, 64, 64) + 0.3  # shift the input mean
        for bn in full_model.bn_layers:
            bn.running_mean = bn.running_mean + 1.0
        out_eval = forward_full(full_model, image, "eval")
        out_adapt = forward_full(full_model, image, "adapt")
        assert not np.allclose(out_eval.anchor_objectness.data,
                               out_adapt.anchor_objectness.data)

    def test_wrong_shape_rejected(self, full_model):
        with pytest.raises(tn.DimensionError):
            forward_full(full_model, np.zeros((1, 3, 32, 32)), "eval")

    def test_micro_arch_selects_all_anchors(self, micro_model):
        image = np.random.default_rng(0).random((1, 3, 8, 8))
        raw = forward_full(micro_model, image, "eval")
        assert raw.proposal_boxes.shape[0] == MICRO_ARCH.num_anchors == 8


class TestPostprocess:
    def _raw(self, boxes, logits):
        k = len(boxes)
        return RawOutputs(
            proposal_logits=tn.Tensor(np.zeros(k)),
            proposal_boxes=np.asarray(boxes, dtype=float),
            proposal_indices=np.arange(k),
            class_logits=tn.Tensor(np.asarray(logits, dtype=float)),
            anchor_objectness=tn.Tensor(np.zeros(k)),
            anchor_deltas=tn.Tensor(np.zeros((k, 4))),
            bn_stats={},
        )

    def test_duplicate_boxes_same_category_suppressed(self):
        # Row logits chosen so category-0 probability is 0.9 / 0.8.
        p0, p1 = 0.9, 0.8
        logits = [[np.log(p0 / (1 - p0)), 0.0], [np.log(p1 / (1 - p1)), 0.0]]
        raw = self._raw([[0, 0, 10, 10], [0, 0, 10, 10]], logits)
        dets = postprocess(raw, score_threshold=0.05, nms_iou=0.5)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(p0, abs=1e-9)

    def test_same_boxes_different_categories_both_survive(self):
        logits = [[4.0, -4.0, 0.0], [-4.0, 4.0, 0.0]]
        raw = self._raw([[0, 0, 10, 10], [0, 0, 10, 10]], logits)
        dets = postprocess(raw, score_threshold=0.05, nms_iou=0.5)
        assert {d.category for d in dets} == {0, 1}

    def test_scores_at_least_threshold(self, full_model, frame):
        raw = forward_full(full_model, frame.image.reshape(1, 3, 64, 64), "eval")
        dets = postprocess(raw, score_threshold=0.3, nms_iou=0.5)
        assert all(0.3 <= d.score <= 1.0 for d in dets)

    def test_no_high_overlap_same_category(self, full_model, frame):
        from wstta.boxes import iou
        raw = forward_full(full_model, frame.image.reshape(1, 3, 64, 64), "eval")
        dets = postprocess(raw, score_threshold=0.05, nms_iou=0.5)
        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.category == b.category:
                    assert iou(a.box, b.box) <= 0.5 + 1e-12

    def test_boxes_inside_image(self, full_model, frame):
        raw = forward_full(full_model, frame.image.reshape(1, 3, 64, 64), "eval")
        for d in postprocess(raw):
            assert 0 <= d.box.x1 < d.box.x2 <= 64
            assert 0 <= d.box.y1 < d.box.y2 <= 64


class TestPretrain:
    def test_zero_steps_is_identity(self, micro_model):
        before = _digest(micro_model)
        frame = render_frame(StreamConfig(seed=1), 0)
        model, curve = pretrain(micro_model, [frame], PretrainConfig(steps=0))
        assert _digest(model) == before
        assert curve == []

    def test_empty_dataset_rejected(self, micro_model):
        with pytest.raises(ValueError):
            pretrain(micro_model, [], PretrainConfig(steps=1))

    def test_loss_finite_and_deterministic(self, full_model, frame):
        cfg = PretrainConfig(steps=3, batch_size=1, seed=9)
        _, curve1 = pretrain(build_model(1, list(CATEGORIES)), [frame], cfg)
        _, curve2 = pretrain(build_model(1, list(CATEGORIES)), [frame], cfg)
        assert curve1 == curve2
        assert all(np.isfinite(v) for v in curve1)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, full_model):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(full_model, p1)
        loaded = load_checkpoint(p1)
        assert _digest(loaded) == _digest(full_model)
        assert loaded.categories == full_model.categories
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_errors_with_offset(self, tmp_path, micro_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(micro_model, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_micro_arch_roundtrip(self, tmp_path, micro_model):
        path = tmp_path / "micro.ckpt"
        save_checkpoint(micro_model, path)
        loaded = load_checkpoint(path)
        assert loaded.arch == MICRO_ARCH
        assert _digest(loaded) == _digest(micro_model)

    def test_fresh_model_checkpoint_digest_is_stable(self, tmp_path):
        # Golden digest: catches accidental init or format drift.
        import hashlib
        model = build_model(0, list(CATEGORIES))
        path = tmp_path / "g.ckpt"
        save_checkpoint(model, path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        model2 = build_model(0, list(CATEGORIES))
        path2 = tmp_path / "g2.ckpt"
        save_checkpoint(model2, path2)
        assert hashlib.sha256(path2.read_bytes()).hexdigest() == digest
