"""Anchor-based BEV detection: target assignment, losses and box decoding.

Anchors share one base size (the mean of the training label dimensions)
and are tiled at every grid cell, one per configured orientation.  The
classification head is trained with a focal loss, the regression head with
a smooth-L1 loss on a 6-value parameterization
(dx/diag, dz/diag, log w ratio, log l ratio, sin dyaw, cos dyaw).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .geometry import BevBox, rotated_iou
from .nnet import REGRESSION_DIMS, HeadOutputs
from .spg import GridSpec

DEFAULT_ORIENTATIONS = (0.0, math.pi / 2)
P_T_FLOOR = 1e-7


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.9
    gamma: float = 2.0
    sigma_sq: float = 1.0
    iou_target: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must be in (0, 1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")
        if self.sigma_sq <= 0:
            raise ValidationError("sigma_sq must be positive")


@dataclass(frozen=True)
class AnchorSet:
    """One anchor per orientation at every cell center, shared base size."""

    base_w: float
    base_l: float
    orientations: tuple[float, ...]
    grid: GridSpec

    def __post_init__(self):
        if self.base_w <= 0 or self.base_l <= 0:
            raise ValidationError("anchor base size must be positive")
        if not self.orientations:
            raise ValidationError("need at least one anchor orientation")

    @property
    def num_orientations(self) -> int:
        return len(self.orientations)

    @property
    def num_anchors(self) -> int:
        return self.num_orientations * self.grid.cells_x * self.grid.cells_z

    @property
    def diagonal(self) -> float:
        return math.hypot(self.base_w, self.base_l)

    def anchor_box(self, a: int, u: int, v: int) -> BevBox:
        cx, cz = self.grid.cell_center(u, v)
        return BevBox(cx, cz, self.base_w, self.base_l, self.orientations[a])

    def flat_index(self, a: int, u: int, v: int) -> int:
        return (a * self.grid.cells_x + u) * self.grid.cells_z + v


def make_anchors(g: GridSpec, gt_boxes: list[BevBox],
                 orientations: tuple[float, ...] = DEFAULT_ORIENTATIONS) -> AnchorSet:
    """Anchor base size = mean (w, l) over the training ground-truth boxes."""
    if not gt_boxes:
        raise ValidationError("cannot size anchors from an empty label set")
    base_w = sum(b.w for b in gt_boxes) / len(gt_boxes)
    base_l = sum(b.l for b in gt_boxes) / len(gt_boxes)
    return AnchorSet(base_w, base_l, tuple(orientations), g)


@dataclass
class TargetAssignment:
    """Per-anchor labels (A, H, W) and regression targets (A, H, W, 6)."""

    labels: np.ndarray
    reg_targets: np.ndarray
    num_positives: int


def encode_regression(anchor: BevBox, gt: BevBox) -> np.ndarray:
    d = anchor.diagonal
    dyaw = gt.yaw - anchor.yaw
    return np.array([
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        math.log(gt.w / anchor.w),
        math.log(gt.l / anchor.l),
        math.sin(dyaw),
        math.cos(dyaw),
    ], dtype=np.float32)


def decode_regression(anchor: BevBox, t: np.ndarray,
                      score: float | None = None, class_id: int = 0) -> BevBox:
    d = anchor.diagonal
    return BevBox(
        cx=anchor.cx + float(t[0]) * d,
        cy=anchor.cy + float(t[1]) * d,
        w=anchor.w * math.exp(float(t[2])),
        l=anchor.l * math.exp(float(t[3])),
        yaw=anchor.yaw + math.atan2(float(t[4]), float(t[5])),
        class_id=class_id,
        score=score,
    )


def _candidate_cells(anchors: AnchorSet, gt: BevBox):
    """Cells whose center is close enough for a nonzero IoU with ``gt``."""
    g = anchors.grid
    reach = 0.5 * (anchors.diagonal + gt.diagonal) + 1e-9
    u_lo = max(0, int((gt.cx - reach - g.x_range[0]) / g.cell_x))
    u_hi = min(g.cells_x - 1, int((gt.cx + reach - g.x_range[0]) / g.cell_x))
    v_lo = max(0, int((gt.cy - reach - g.z_range[0]) / g.cell_z))
    v_hi = min(g.cells_z - 1, int((gt.cy + reach - g.z_range[0]) / g.cell_z))
    for u in range(u_lo, u_hi + 1):
        for v in range(v_lo, v_hi + 1):
            yield u, v


def assign_targets(anchors: AnchorSet, gts: list[BevBox],
                   p: LossParams) -> TargetAssignment:
    """Split anchors into positives and negatives against the ground truth.

    An anchor is positive when its best IoU reaches ``p.iou_target`` and
    regresses to its argmax-IoU box.  Each ground-truth box additionally
    forces its own single highest-IoU anchor positive (ties broken by the
    lowest flat anchor index) so no box is left without a training signal.
    """
    g = anchors.grid
    a_n = anchors.num_orientations
    shape = (a_n, g.cells_x, g.cells_z)
    labels = np.zeros(shape, dtype=bool)
    targets = np.zeros(shape + (REGRESSION_DIMS,), dtype=np.float32)

    best_iou = np.zeros(shape, dtype=np.float64)
    best_gt = np.full(shape, -1, dtype=np.int64)
    gt_best: list[tuple[float, int, tuple[int, int, int]]] = []

    for gi, gt in enumerate(gts):
        top_iou, top_flat, top_idx = -1.0, None, None
        for u, v in _candidate_cells(anchors, gt):
            for a in range(a_n):
                iou = rotated_iou(anchors.anchor_box(a, u, v), gt)
                if iou > best_iou[a, u, v]:
                    best_iou[a, u, v] = iou
                    best_gt[a, u, v] = gi
                flat = anchors.flat_index(a, u, v)
                if iou > top_iou or (iou == top_iou and (top_flat is None or flat < top_flat)):
                    top_iou, top_flat, top_idx = iou, flat, (a, u, v)
        if top_idx is None:
            # Box has no candidate cell (can only happen off-grid): force
            # the nearest anchor so the >=1-positive invariant holds.
            uu = min(max(int((gt.cx - g.x_range[0]) / g.cell_x), 0), g.cells_x - 1)
            vv = min(max(int((gt.cy - g.z_range[0]) / g.cell_z), 0), g.cells_z - 1)
            top_idx = (0, uu, vv)
        gt_best.append((top_iou, gi, top_idx))

    for (a, u, v) in zip(*np.nonzero(best_iou >= p.iou_target)):
        labels[a, u, v] = True
        targets[a, u, v] = encode_regression(
            anchors.anchor_box(a, u, v), gts[best_gt[a, u, v]])

    for _iou, gi, (a, u, v) in gt_best:
        labels[a, u, v] = True
        targets[a, u, v] = encode_regression(anchors.anchor_box(a, u, v), gts[gi])

    return TargetAssignment(labels, targets, int(labels.sum()))


# ---------------------------------------------------------------------------
# losses


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def focal_loss(p_t: np.ndarray, positive: np.ndarray, p: LossParams):
    """Mean focal loss over anchors plus its gradient w.r.t. the logits.

    ``p_t`` is the probability assigned to the true class (sigmoid output
    for positives, its complement for negatives); the alpha weight is
    ``alpha`` on positives and ``1 - alpha`` on negatives.
    """
    p_t = np.asarray(p_t, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    if p_t.size == 0:
        return 0.0, np.zeros_like(p_t)
    q = np.clip(p_t, P_T_FLOOR, 1.0 - P_T_FLOOR)
    inside = (p_t > P_T_FLOOR) & (p_t < 1.0 - P_T_FLOOR)
    alpha_t = np.where(positive, p.alpha, 1.0 - p.alpha)
    one_minus = 1.0 - q
    log_q = np.log(q)
    loss = float(np.mean(-alpha_t * one_minus ** p.gamma * log_q))

    if p.gamma == 0.0:
        dldq = -alpha_t / q
    else:
        dldq = alpha_t * (p.gamma * one_minus ** (p.gamma - 1.0) * log_q
                          - one_minus ** p.gamma / q)
    sign = np.where(positive, 1.0, -1.0)
    dlogit = dldq * q * one_minus * sign * inside / p_t.size
    return loss, dlogit


def smooth_l1(delta: np.ndarray, p: LossParams):
    """Mean smooth-L1 over the residuals plus d(loss)/d(delta).

    Quadratic ``0.5 * sigma_sq * d^2`` below the knee ``1/sigma_sq``,
    linear ``|d| - 0.5/sigma_sq`` beyond it.  Empty input yields 0.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.size == 0:
        return 0.0, np.zeros_like(delta)
    knee = 1.0 / p.sigma_sq
    quad = np.abs(delta) < knee
    vals = np.where(quad, 0.5 * p.sigma_sq * delta * delta,
                    np.abs(delta) - 0.5 / p.sigma_sq)
    grad = np.where(quad, p.sigma_sq * delta, np.sign(delta)) / delta.size
    return float(vals.mean()), grad


def _smooth_l1_branches(delta: np.ndarray, p: LossParams) -> np.ndarray:
    return np.abs(delta) < (1.0 / p.sigma_sq)


def _raw_loss(heads: HeadOutputs, labels: np.ndarray,
              reg_targets: np.ndarray, p: LossParams):
    labels = np.asarray(labels, dtype=bool)
    n, a, h, w = labels.shape
    if heads.cls.shape != (n, a, h, w):
        raise ValidationError(f"cls head shape {heads.cls.shape} does not match "
                              f"labels {labels.shape}")
    if heads.reg.shape != (n, REGRESSION_DIMS * a, h, w):
        raise ValidationError(f"reg head shape {heads.reg.shape} inconsistent with "
                              f"{a} anchors per cell")

    prob = sigmoid(np.asarray(heads.cls, dtype=np.float64))
    p_t = np.where(labels, prob, 1.0 - prob)
    cls_loss, d_logit = focal_loss(p_t, labels, p)

    reg_pred = heads.reg.reshape(n, a, REGRESSION_DIMS, h, w).transpose(0, 1, 3, 4, 2)
    delta = (reg_pred[labels] - reg_targets[labels]).astype(np.float64)
    reg_loss, d_delta = smooth_l1(delta, p)

    d_reg = np.zeros((n, a, h, w, REGRESSION_DIMS), dtype=np.float64)
    d_reg[labels] = d_delta
    d_reg = d_reg.transpose(0, 1, 4, 2, 3).reshape(n, REGRESSION_DIMS * a, h, w)

    branch = (np.packbits(_smooth_l1_branches(delta, p)).tobytes()
              + np.packbits((p_t > P_T_FLOOR) & (p_t < 1.0 - P_T_FLOOR)).tobytes())
    return cls_loss, reg_loss, (d_logit, d_reg), branch


def total_loss_with_branches(heads: HeadOutputs, labels: np.ndarray,
                             reg_targets: np.ndarray, p: LossParams):
    """Loss on raw (N, A, H, W) labels / (N, A, H, W, 6) targets.

    Returns (loss, (d cls logits, d reg outputs), branch signature bytes);
    the signature feeds the gradient checker's kink detection.
    """
    cls_loss, reg_loss, grads, branch = _raw_loss(heads, labels, reg_targets, p)
    return cls_loss + reg_loss, grads, branch


def _stack_assignments(assignments):
    if isinstance(assignments, TargetAssignment):
        assignments = [assignments]
    labels = np.stack([t.labels for t in assignments])
    targets = np.stack([t.reg_targets for t in assignments])
    return labels, targets


def loss_breakdown(heads: HeadOutputs, assignments, p: LossParams):
    """(total, focal, smooth, (d cls, d reg)) over a batch of assignments."""
    labels, targets = _stack_assignments(assignments)
    cls_loss, reg_loss, grads, _ = _raw_loss(heads, labels, targets, p)
    return cls_loss + reg_loss, cls_loss, reg_loss, grads


def total_loss(heads: HeadOutputs, assignments, p: LossParams):
    """Total detection loss (focal + smooth-L1) over a batch.

    ``assignments`` is one TargetAssignment or a list of them, one per
    batch item.  Returns (loss, (d cls logits, d reg outputs)).
    """
    labels, targets = _stack_assignments(assignments)
    cls_loss, reg_loss, grads, _ = _raw_loss(heads, labels, targets, p)
    return cls_loss + reg_loss, grads


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DetectionSet:
    """Scored boxes sorted by descending score."""

    boxes: list[BevBox] = field(default_factory=list)

    def __post_init__(self):
        for b in self.boxes:
            if b.score is None or not (0.0 < b.score < 1.0):
                raise ValidationError("detections must carry scores in (0, 1)")
        scores = [b.score for b in self.boxes]
        if any(s0 < s1 for s0, s1 in zip(scores, scores[1:])):
            raise ValidationError("detections must be sorted by descending score")

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def to_json(self) -> str:
        return json.dumps([
            {"cx": b.cx, "cy": b.cy, "w": b.w, "l": b.l, "yaw": b.yaw,
             "score": b.score, "class": b.class_id}
            for b in self.boxes
        ], indent=2)

    @classmethod
    def from_json(cls, data: str | bytes) -> "DetectionSet":
        try:
            doc = json.loads(data)
            boxes = [BevBox(cx=float(e["cx"]), cy=float(e["cy"]), w=float(e["w"]),
                            l=float(e["l"]), yaw=float(e["yaw"]),
                            class_id=int(e["class"]), score=float(e["score"]))
                     for e in doc]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"detections JSON: {e}") from e
        return cls(boxes)


def nms(dets: DetectionSet, iou_thresh: float = 0.3,
        max_keep: int | None = None) -> DetectionSet:
    """Greedy suppression: drop any box overlapping a kept higher-scored box
    with IoU strictly above the threshold.  Equal scores keep input order."""
    kept: list[BevBox] = []
    for box in dets.boxes:
        if max_keep is not None and len(kept) >= max_keep:
            break
        if all(rotated_iou(box, k) <= iou_thresh for k in kept):
            kept.append(box)
    return DetectionSet(kept)


def decode_predictions(heads: HeadOutputs, anchors: AnchorSet,
                       score_thresh: float = 0.3, nms_iou: float = 0.3,
                       class_id: int = 0, pre_nms_top: int = 512,
                       max_detections: int = 128) -> DetectionSet:
    """Turn single-frame head outputs into scored, NMS-filtered boxes.

    Only the ``pre_nms_top`` highest-scoring anchors above the threshold
    are decoded (ties resolved by flat anchor index), and at most
    ``max_detections`` survive suppression.
    """
    cls, reg = heads.cls, heads.reg
    if cls.ndim == 4:
        if cls.shape[0] != 1:
            raise ValidationError("decode_predictions expects a single frame")
        cls, reg = cls[0], reg[0]
    a_n = anchors.num_orientations
    g = anchors.grid
    # Clamp away exact 0/1 so saturated logits still satisfy the open-interval
    # score invariant.
    scores = np.clip(sigmoid(cls.astype(np.float64)), 1e-9, 1.0 - 1e-9)
    reg = reg.reshape(a_n, REGRESSION_DIMS, g.cells_x, g.cells_z)

    flat_scores = scores.reshape(-1)
    sel = np.flatnonzero(flat_scores >= score_thresh)
    if sel.size > pre_nms_top:
        order = np.lexsort((sel, -flat_scores[sel]))
        sel = sel[order[:pre_nms_top]]
    entries = []
    for flat in sel:
        a, u, v = np.unravel_index(int(flat), scores.shape)
        s = float(flat_scores[flat])
        box = decode_regression(anchors.anchor_box(a, u, v), reg[a, :, u, v],
                                score=s, class_id=class_id)
        entries.append((-s, int(flat), box))
    entries.sort(key=lambda e: (e[0], e[1]))
    return nms(DetectionSet([e[2] for e in entries]), iou_thresh=nms_iou,
               max_keep=max_detections)
