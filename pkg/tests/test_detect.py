import math

import numpy as np
import pytest

from spgfuse.detect import (
    AnchorSet,
    DetectionSet,
    LossParams,
    TargetAssignment,
    assign_targets,
    decode_predictions,
    decode_regression,
    encode_regression,
    focal_loss,
    make_anchors,
    nms,
    sigmoid,
    smooth_l1,
    total_loss,
)
from spgfuse.errors import ValidationError
from spgfuse.geometry import BevBox, rotated_iou
from spgfuse.nnet import HeadOutputs
from spgfuse.spg import GridSpec

GRID = GridSpec(x_range=(0.0, 40.0), z_range=(-20.0, 20.0), cells_x=32, cells_z=32)


def box(cx, cy, w=2.0, l=4.0, yaw=0.0, score=None):
    return BevBox(cx, cy, w, l, yaw, score=score)


class TestMakeAnchors:
    def test_mean_base_size(self):
        a = make_anchors(GRID, [box(0, 0, 2, 4), box(0, 0, 2, 6)])
        assert (a.base_w, a.base_l) == (2.0, 5.0)

    def test_anchor_count(self):
        g = GridSpec()
        a = make_anchors(g, [box(0, 0)])
        assert a.num_anchors == 128 * 128 * 2 == 32768

    def test_cell_center_rule(self):
        a = make_anchors(GRID, [box(0, 0)])
        first = a.anchor_box(0, 0, 0)
        assert first.cx == pytest.approx(GRID.x_range[0] + GRID.cell_x / 2)
        assert first.cy == pytest.approx(GRID.z_range[0] + GRID.cell_z / 2)

    def test_empty_labels_rejected(self):
        with pytest.raises(ValidationError):
            make_anchors(GRID, [])


class TestRegressionCoding:
    def test_identity_target(self):
        a = box(10.0, 0.0)
        t = encode_regression(a, a)
        np.testing.assert_allclose(t, [0, 0, 0, 0, 0, 1], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            anchor = box(rng.uniform(5, 35), rng.uniform(-15, 15),
                         rng.uniform(1, 3), rng.uniform(2, 6),
                         rng.uniform(-math.pi, math.pi))
            gt = box(anchor.cx + rng.uniform(-2, 2), anchor.cy + rng.uniform(-2, 2),
                     rng.uniform(1, 3), rng.uniform(2, 6),
                     rng.uniform(-math.pi, math.pi))
            back = decode_regression(anchor, encode_regression(anchor, gt).astype(np.float64))
            assert abs(back.cx - gt.cx) < 1e-5
            assert abs(back.cy - gt.cy) < 1e-5
            assert abs(back.w - gt.w) < 1e-5
            assert abs(back.l - gt.l) < 1e-5
            dyaw = (back.yaw - gt.yaw) % (2 * math.pi)
            assert min(dyaw, 2 * math.pi - dyaw) < 1e-5


class TestAssignTargets:
    params = LossParams()

    def test_no_gt_all_negative(self):
        anchors = make_anchors(GRID, [box(0, 0)])
        t = assign_targets(anchors, [], self.params)
        assert t.num_positives == 0
        assert not t.labels.any()

    def test_anchor_equal_to_gt(self):
        anchors = make_anchors(GRID, [box(0, 0, 2, 4)])
        cx, cy = GRID.cell_center(16, 16)
        gt = box(cx, cy, 2, 4, 0.0)
        t = assign_targets(anchors, [gt], self.params)
        assert t.labels[0, 16, 16]
        np.testing.assert_allclose(t.reg_targets[0, 16, 16], [0, 0, 0, 0, 0, 1],
                                   atol=1e-6)

    def test_every_gt_has_a_positive(self):
        # Decoding each positive anchor's regression target must recover
        # every ground-truth box.
        rng = np.random.default_rng(1)
        anchors = make_anchors(GRID, [box(0, 0, 2, 4.5)])
        for _ in range(20):
            gts = [box(rng.uniform(4, 36), rng.uniform(-16, 16),
                       rng.uniform(1.6, 2.4), rng.uniform(3.5, 5.5),
                       rng.uniform(-math.pi, math.pi))
                   for _ in range(rng.integers(1, 6))]
            t = assign_targets(anchors, gts, self.params)
            decoded = [decode_regression(anchors.anchor_box(a, u, v), t.reg_targets[a, u, v])
                       for a, u, v in np.argwhere(t.labels)]
            for gt in gts:
                assert any(abs(d.cx - gt.cx) < 1e-4 and abs(d.cy - gt.cy) < 1e-4
                           and abs(d.w - gt.w) < 1e-4 for d in decoded), gt

    def test_forced_match_is_exhaustive_argmax(self):
        anchors = make_anchors(GRID, [box(0, 0, 2, 4)])
        # Offset box at 45 degrees (between the two anchor orientations):
        # its best IoU stays below 0.5.
        gt = box(10.6, 3.4, 1.7, 3.5, math.pi / 4)
        ious = np.zeros((anchors.num_orientations, GRID.cells_x, GRID.cells_z))
        for a in range(anchors.num_orientations):
            for u in range(GRID.cells_x):
                for v in range(GRID.cells_z):
                    ious[a, u, v] = rotated_iou(anchors.anchor_box(a, u, v), gt)
        assert ious.max() < 0.5
        flat_order = ious.reshape(-1)
        best_flat = int(np.flatnonzero(flat_order == flat_order.max())[0])
        t = assign_targets(anchors, [gt], self.params)
        assert t.num_positives == 1
        assert int(np.flatnonzero(t.labels.reshape(-1))[0]) == best_flat


class TestFocalLoss:
    def test_perfect_confidence(self):
        loss, _ = focal_loss(np.array([1.0]), np.array([True]), LossParams())
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_hand_value(self):
        loss, _ = focal_loss(np.array([0.5]), np.array([True]), LossParams())
        assert loss == pytest.approx(0.9 * 0.25 * math.log(2), abs=1e-9)
        assert loss == pytest.approx(0.155958, abs=1e-6)

    def test_negative_weighting(self):
        loss, _ = focal_loss(np.array([0.5]), np.array([False]), LossParams())
        assert loss == pytest.approx(0.1 * 0.25 * math.log(2), abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=40)
        positive = rng.random(40) < 0.3
        p = LossParams()

        def eval_loss(z):
            prob = sigmoid(z)
            p_t = np.where(positive, prob, 1.0 - prob)
            return focal_loss(p_t, positive, p)[0]

        prob = sigmoid(logits)
        p_t = np.where(positive, prob, 1.0 - prob)
        _, grad = focal_loss(p_t, positive, p)
        eps = 1e-7
        for i in range(40):
            zp = logits.copy(); zp[i] += eps
            zm = logits.copy(); zm[i] -= eps
            numeric = (eval_loss(zp) - eval_loss(zm)) / (2 * eps)
            assert abs(grad[i] - numeric) <= 1e-6 * max(abs(numeric), abs(grad[i]), 1e-3)

    def test_monotone_decreasing_in_pt(self):
        p = LossParams()
        pts = np.linspace(0.01, 0.99, 50)
        losses = [focal_loss(np.array([v]), np.array([True]), p)[0] for v in pts]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_bce_reduction_sanity(self):
        # gamma=0, alpha=0.5 -> exactly half of binary cross-entropy.
        rng = np.random.default_rng(3)
        p = LossParams(alpha=0.5, gamma=0.0)
        prob = rng.uniform(0.05, 0.95, size=30)
        positive = rng.random(30) < 0.5
        p_t = np.where(positive, prob, 1.0 - prob)
        loss, _ = focal_loss(p_t, positive, p)
        bce = -np.mean(np.where(positive, np.log(prob), np.log(1 - prob)))
        assert loss == pytest.approx(0.5 * bce, abs=1e-9)


class TestSmoothL1:
    def test_branch_values(self):
        p = LossParams()
        for delta, want in ((0.5, 0.125), (1.0, 0.5), (2.0, 1.5)):
            loss, _ = smooth_l1(np.array([delta]), p)
            assert loss == pytest.approx(want, abs=1e-9)

    def test_empty_is_zero(self):
        loss, grad = smooth_l1(np.array([]), LossParams())
        assert loss == 0.0
        assert grad.size == 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        # Stay away from the knee where the derivative jumps.
        deltas = rng.uniform(-3, 3, size=50)
        deltas = deltas[np.abs(np.abs(deltas) - 1.0) > 1e-3]
        p = LossParams()
        _, grad = smooth_l1(deltas, p)
        eps = 1e-7
        for i in range(len(deltas)):
            dp = deltas.copy(); dp[i] += eps
            dm = deltas.copy(); dm[i] -= eps
            numeric = (smooth_l1(dp, p)[0] - smooth_l1(dm, p)[0]) / (2 * eps)
            assert abs(grad[i] - numeric) <= 1e-6 * max(abs(numeric), 1e-3)

    def test_non_negative(self):
        rng = np.random.default_rng(5)
        loss, _ = smooth_l1(rng.normal(size=100) * 4, LossParams())
        assert loss >= 0


class TestTotalLoss:
    def make_assignment(self, anchors, gts):
        return assign_targets(anchors, gts, LossParams())

    def test_no_positives_is_focal_only(self):
        anchors = make_anchors(GRID, [box(0, 0)])
        t = TargetAssignment(np.zeros((2, 32, 32), bool),
                             np.zeros((2, 32, 32, 6), np.float32), 0)
        rng = np.random.default_rng(6)
        heads = HeadOutputs(rng.normal(size=(1, 2, 32, 32)),
                            rng.normal(size=(1, 12, 32, 32)))
        loss, (d_cls, d_reg) = total_loss(heads, t, LossParams())
        prob = sigmoid(heads.cls)
        focal_only, _ = focal_loss(1.0 - prob, np.zeros_like(prob, dtype=bool),
                                   LossParams())
        assert loss == pytest.approx(focal_only, abs=1e-12)
        assert not d_reg.any()

    def test_component_sum(self):
        # One positive anchor with p_t = 0.5 and one regression residual of
        # 0.5 in a single target slot; every other logit is driven to its
        # saturated-correct value so its focal term vanishes.
        labels = np.zeros((1, 2, 32, 32), bool)
        labels[0, 0, 3, 3] = True
        targets = np.zeros((1, 2, 32, 32, 6), np.float32)
        cls = np.full((1, 2, 32, 32), -40.0)
        cls[0, 0, 3, 3] = 0.0  # p = 0.5 for the positive
        reg = np.zeros((1, 12, 32, 32))
        reg[0, 0, 3, 3] = 0.5  # residual 0.5 against a zero target
        heads = HeadOutputs(cls, reg)
        t = TargetAssignment(labels[0], targets[0], 1)
        loss, _ = total_loss(heads, t, LossParams())
        n_anchors = 2 * 32 * 32
        want = (0.9 * 0.25 * math.log(2)) / n_anchors + (0.5 * 0.5 ** 2) / 6
        assert loss == pytest.approx(want, rel=1e-6)

    def test_both_zero(self):
        labels = np.zeros((1, 1, 4, 4), bool)
        labels[0, 0, 1, 1] = True
        targets = np.zeros((1, 1, 4, 4, 6), np.float32)
        targets[0, 0, 1, 1] = [0, 0, 0, 0, 0, 0]
        cls = np.full((1, 1, 4, 4), -40.0)
        cls[0, 0, 1, 1] = 40.0  # p_t ~ 1 for the positive
        heads = HeadOutputs(cls, np.zeros((1, 6, 4, 4)))
        t = TargetAssignment(labels[0], targets[0], 1)
        loss, _ = total_loss(heads, t, LossParams())
        assert loss == pytest.approx(0.0, abs=1e-6)


class TestDecodeAndNms:
    def test_all_negative_logits_empty(self):
        anchors = make_anchors(GRID, [box(0, 0)])
        heads = HeadOutputs(np.full((1, 2, 32, 32), -50.0),
                            np.zeros((1, 12, 32, 32)))
        dets = decode_predictions(heads, anchors)
        assert len(dets) == 0

    def test_target_regression_round_trip(self):
        anchors = make_anchors(GRID, [box(0, 0, 2, 4)])
        gt = box(10.3, -2.2, 1.8, 4.4, 0.35)
        t = assign_targets(anchors, [gt], LossParams())
        a, u, v = np.argwhere(t.labels)[0]
        cls = np.full((1, 2, 32, 32), -50.0)
        cls[0, a, u, v] = 5.0
        reg = np.zeros((1, 12, 32, 32))
        reg[0, 6 * a:6 * a + 6, u, v] = t.reg_targets[a, u, v]
        dets = decode_predictions(HeadOutputs(cls, reg), anchors, score_thresh=0.3)
        assert len(dets) == 1
        d = dets.boxes[0]
        assert abs(d.cx - gt.cx) < 1e-5
        assert abs(d.cy - gt.cy) < 1e-5
        assert abs(d.w - gt.w) < 1e-5
        assert abs(d.l - gt.l) < 1e-5

    def test_scores_sorted_descending(self):
        anchors = make_anchors(GRID, [box(0, 0)])
        rng = np.random.default_rng(7)
        heads = HeadOutputs(rng.normal(size=(1, 2, 32, 32)),
                            rng.normal(size=(1, 12, 32, 32)) * 0.1)
        dets = decode_predictions(heads, anchors, score_thresh=0.5, nms_iou=0.99)
        scores = [b.score for b in dets]
        assert scores == sorted(scores, reverse=True)

    def test_nms_single_box(self):
        d = DetectionSet([box(5, 0, score=0.9)])
        assert nms(d).boxes == d.boxes

    def test_nms_identical_boxes(self):
        d = DetectionSet([box(5, 0, score=0.9), box(5, 0, score=0.8)])
        out = nms(d)
        assert len(out) == 1
        assert out.boxes[0].score == 0.9

    def test_nms_matches_greedy_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            n = int(rng.integers(2, 8))
            boxes = [box(rng.uniform(0, 12), rng.uniform(-6, 6),
                         rng.uniform(1.5, 3), rng.uniform(3, 5),
                         rng.uniform(-math.pi, math.pi),
                         score=float(rng.uniform(0.05, 0.95)))
                     for _ in range(n)]
            boxes.sort(key=lambda b: -b.score)
            thr = 0.3
            keep_oracle = []
            for i, b in enumerate(boxes):
                if all(rotated_iou(b, boxes[j]) <= thr for j in keep_oracle):
                    keep_oracle.append(i)
            got = nms(DetectionSet(boxes), thr)
            assert got.boxes == [boxes[i] for i in keep_oracle]

    def test_detections_json_round_trip(self):
        d = DetectionSet([box(5.5, -1.25, score=0.75), box(9.0, 2.0, score=0.25)])
        back = DetectionSet.from_json(d.to_json())
        assert back.boxes == d.boxes
