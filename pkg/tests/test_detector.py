"""Second-stage head: RoI sampling, forward, loss, class-wise inference."""

import numpy as np
import pytest

import minircnn.tensor as T
from minircnn.detector import (
    DetectorHead,
    RoiBatch,
    RoiSampleConfig,
    class_probs,
    detect,
    detector_forward,
    detector_loss,
    sample_rois,
)
from minircnn.rng import Rng
from minircnn.tensor import Tensor


def make_head(n_classes=3, in_ch=4, seed=0):
    return DetectorHead(Rng(seed, "init"), in_ch, n_classes)


def feat(seed=0, ch=4, hw=16):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(ch, hw, hw)).astype(np.float32))


class TestForward:
    def test_output_widths(self):
        head = make_head(n_classes=3)
        assert head.cls.w.value.shape[1] == 4   # C+1 columns
        assert head.reg.w.value.shape[1] == 12  # 4C columns

    def test_probs_sum_to_one(self):
        head = make_head()
        props = np.array([[0.0, 0.0, 64.0, 64.0], [10.0, 10.0, 50.0, 40.0]])
        cls_logits, deltas = detector_forward(feat(), props, head, 1 / 8)
        p = class_probs(cls_logits)
        assert p.shape == (2, 4)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert deltas.shape == (2, 12)

    def test_constant_features_identical_rows(self):
        head = make_head()
        x = Tensor(np.full((4, 16, 16), 0.37, dtype=np.float32))
        props = np.array([[0.0, 0.0, 30.0, 30.0], [40.0, 40.0, 128.0, 100.0]])
        cls_logits, deltas = detector_forward(x, props, head, 1 / 8)
        np.testing.assert_allclose(cls_logits.data[0], cls_logits.data[1],
                                   atol=1e-6)
        np.testing.assert_allclose(deltas.data[0], deltas.data[1], atol=1e-6)

    def test_empty_proposals(self):
        head = make_head()
        cls_logits, deltas = detector_forward(feat(), np.zeros((0, 4)), head,
                                              1 / 8)
        assert cls_logits.data.shape[0] == 0 and deltas.data.shape[0] == 0

    def test_gradcheck_through_roi_pool_64bit(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.permutation(4 * 100).astype(np.float64)
                   .reshape(4, 10, 10) * 0.03, requires_grad=True)
        w = Tensor(rng.normal(size=(4 * 4, 3)) * 0.3, requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        rois = np.array([[0.0, 0.0, 40.0, 40.0], [16.0, 8.0, 72.0, 64.0]])

        def fn(x, w, b):
            pooled = T.roi_pool(x, rois, 1 / 8, 2)
            flat = T.reshape(pooled, (2, 16))
            return T.tsum(T.softmax_logloss(T.linear(flat, w, b),
                                            np.array([0, 2])))

        assert T.gradcheck(fn, [x, w, b]) < 1e-4


class TestSampleRois:
    GT = np.array([[10.0, 10.0, 40.0, 40.0], [60.0, 60.0, 100.0, 90.0]])
    CLS = np.array([1, 3])

    def test_gt_proposal_is_foreground_zero_deltas(self):
        batch = sample_rois(self.GT[:1].copy(), self.GT, self.CLS,
                            RoiSampleConfig(), Rng(0, "sampling"))
        i = next(j for j, r in enumerate(batch.rois)
                 if np.allclose(r, self.GT[0]))
        assert batch.labels[i] == 1
        np.testing.assert_allclose(batch.targets[i], 0.0, atol=1e-12)

    def test_low_iou_is_background(self):
        props = np.array([[0.0, 0.0, 12.0, 12.0]])  # IoU < 0.5 with both gt
        batch = sample_rois(props, self.GT, self.CLS, RoiSampleConfig(),
                            Rng(0, "sampling"))
        bg = [lab for r, lab in zip(batch.rois, batch.labels)
              if np.allclose(r, props[0])]
        assert bg and all(v == 0 for v in bg)

    def test_budget_and_fg_cap(self):
        rng = np.random.default_rng(1)
        x1 = rng.uniform(0, 80, 500)
        y1 = rng.uniform(0, 80, 500)
        props = np.stack([x1, y1, x1 + rng.uniform(10, 48, 500),
                          y1 + rng.uniform(10, 48, 500)], axis=1)
        cfg = RoiSampleConfig()
        batch = sample_rois(props, self.GT, self.CLS, cfg, Rng(2, "sampling"))
        assert len(batch.labels) <= cfg.rois_per_image
        assert (batch.labels > 0).sum() <= int(cfg.fg_fraction
                                               * cfg.rois_per_image)

    def test_fg_labels_match_gt_classes(self):
        batch = sample_rois(self.GT.copy(), self.GT, self.CLS,
                            RoiSampleConfig(), Rng(3, "sampling"))
        for lab in batch.labels:
            assert lab in (0, 1, 3)

    def test_degenerate_scene_all_background(self):
        props = np.array([[0.0, 0.0, 5.0, 5.0]])
        batch = sample_rois(props, np.zeros((0, 4)), np.zeros(0, dtype=int),
                            RoiSampleConfig(), Rng(4, "sampling"))
        assert np.all(batch.labels == 0)


class TestDetectorLoss:
    def _logits(self, labels, n_classes=3, hot=50.0):
        out = np.zeros((len(labels), n_classes + 1))
        out[np.arange(len(labels)), labels] = hot
        return Tensor(out)

    def test_perfect_is_zero(self):
        labels = np.array([0, 1, 2])
        deltas = Tensor(np.zeros((3, 12)))
        targets = np.zeros((3, 4))
        batch = RoiBatch(np.zeros((3, 4)), labels, targets)
        loss, _, _ = detector_loss(self._logits(labels), deltas, batch)
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_all_background_reg_term_zero(self):
        labels = np.zeros(4, dtype=int)
        deltas = Tensor(np.random.default_rng(0).normal(size=(4, 12)))
        batch = RoiBatch(np.zeros((4, 4)), labels, np.zeros((4, 4)))
        loss, cls_val, reg_val = detector_loss(self._logits(labels), deltas, batch)
        assert reg_val == 0.0
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_single_fg_unit_delta_error_contributes_half(self):
        labels = np.array([2])
        deltas = np.zeros((1, 12))
        deltas[0, 4] = 1.0  # class 2 slice is columns 4..7; tx error of 1
        batch = RoiBatch(np.zeros((1, 4)), labels, np.zeros((1, 4)))
        loss, _, reg_val = detector_loss(self._logits(labels), Tensor(deltas),
                                         batch)
        assert reg_val == pytest.approx(0.5, abs=1e-9)
        assert loss.item() == pytest.approx(0.5, abs=1e-9)

    def test_only_matched_class_slice_is_read(self):
        labels = np.array([1, 0])
        rng = np.random.default_rng(5)
        deltas = rng.normal(size=(2, 12))
        targets = np.zeros((2, 4))
        batch = RoiBatch(np.zeros((2, 4)), labels, targets)
        base = detector_loss(self._logits(labels), Tensor(deltas.copy()),
                             batch)[0].item()
        noise = deltas.copy()
        noise[0, 4:] = 99.0       # classes 2,3 slices of the fg row
        noise[1, :] = -99.0       # background row entirely
        perturbed = detector_loss(self._logits(labels), Tensor(noise),
                                  batch)[0].item()
        assert perturbed == pytest.approx(base, rel=1e-12)

    def test_gradcheck_64bit(self):
        rng = np.random.default_rng(6)
        labels = np.array([0, 1, 2, 3])
        targets = rng.normal(size=(4, 4)) * 0.3
        logits = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        deltas = Tensor(rng.normal(size=(4, 12)) * 0.4, requires_grad=True)
        batch = RoiBatch(np.zeros((4, 4)), labels, targets)
        # random draws here stay away from smooth-L1 branch boundaries
        assert T.gradcheck(
            lambda l, d: detector_loss(l, d, batch)[0],
            [logits, deltas]) < 1e-4


class TestDetect:
    def test_returns_positive_classes_only(self):
        head = make_head()
        props = np.array([[0.0, 0.0, 60.0, 60.0], [30.0, 30.0, 100.0, 90.0]])
        out = detect(feat(7), props, head, 1 / 8, 128, 128)
        assert all(d.class_id >= 1 for d in out)
        assert all(0 <= d.score <= 1 for d in out)
        for d in out:
            assert 0 <= d.box.x1 <= d.box.x2 <= 128
            assert 0 <= d.box.y1 <= d.box.y2 <= 128

    def test_high_threshold_empty(self):
        head = make_head()
        props = np.array([[0.0, 0.0, 60.0, 60.0]])
        out = detect(feat(7), props, head, 1 / 8, 128, 128, score_thresh=1.01)
        assert out == []

    def test_duplicate_proposals_collapse(self):
        head = make_head()
        props = np.array([[8.0, 8.0, 72.0, 72.0], [8.0, 8.0, 72.0, 72.0]])
        out = detect(feat(8), props, head, 1 / 8, 128, 128, score_thresh=0.0)
        per_class = {}
        for d in out:
            per_class[d.class_id] = per_class.get(d.class_id, 0) + 1
        assert all(v == 1 for v in per_class.values())

    def test_empty_proposals(self):
        head = make_head()
        assert detect(feat(), np.zeros((0, 4)), head, 1 / 8, 128, 128) == []

    def test_max_per_image(self):
        head = make_head()
        rng = np.random.default_rng(9)
        x1 = rng.uniform(0, 60, 200)
        y1 = rng.uniform(0, 60, 200)
        props = np.stack([x1, y1, x1 + rng.uniform(20, 60, 200),
                          y1 + rng.uniform(20, 60, 200)], axis=1)
        out = detect(feat(9), props, head, 1 / 8, 128, 128,
                     score_thresh=0.0, max_per_image=7)
        assert len(out) <= 7
