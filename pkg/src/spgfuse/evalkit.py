"""BEV average precision and the robustness / ablation evaluation runner.

AP is the exact (all-point interpolated) area under the precision-recall
curve at a rotated-IoU matching threshold of 0.5.  ``run_eval`` evaluates a
trained detector over a dataset under one or more input conditions:

``clear``              encode with the stored masks
``radar-only``         encode without masks (semantic channels zero)
``corrupt-semantics``  mask encoding, then noisy/zeroed semantic channels
``corrupt-radar``      mask encoding, then occupancy/point channels zeroed
``weather:<kind>``     masks degraded as if segmented from weather-hit
                       images (kind = fog, rain or snow)

When several conditions are evaluated the report carries each one's AP and
its percentage drop against clear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .detect import AnchorSet, DetectionSet, decode_predictions
from .errors import ConfigError, ValidationError
from .geometry import BevBox, rotated_iou
from .nnet import HeadOutputs, ModelWeights, model_forward
from .spg import CH_SEMANTIC, NUM_CHANNELS, NUM_SEMANTIC
from .synthgen import degrade_mask
from .training import encode_frame

VEHICLE_CLASS = "vehicle"

# Mask degradation severity per weather kind (label-flip rate, blot fraction);
# rain hits segmentation hardest, snow the least.
WEATHER_MASK_SEVERITY = {
    "fog": (0.15, 0.25),
    "rain": (0.35, 0.45),
    "snow": (0.08, 0.10),
}

SEMANTIC_NOISE_RATE = 0.3
SEMANTIC_ZERO_FRAC = 0.5


def match_detections(dets: DetectionSet, gts: list[BevBox],
                     iou_thresh: float = 0.5) -> list[bool]:
    """Greedy TP/FP flags: each detection, in score order, claims the
    highest-IoU still-unmatched ground-truth box at or above the threshold."""
    taken = [False] * len(gts)
    flags = []
    for det in dets:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(det, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Monotone non-increasing precision envelope, integrated over recall.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class ModeResult:
    ap: float
    tp: int
    fp: int
    fn: int
    num_gt: int
    precision: list[float]
    recall: list[float]
    drop_pct_vs_clear: float | None = None


@dataclass
class EvalReport:
    iou_thresh: float
    results: dict[str, ModeResult]

    @property
    def primary_mode(self) -> str:
        return next(iter(self.results))

    @property
    def ap_by_class(self) -> dict[str, float]:
        return {VEHICLE_CLASS: self.results[self.primary_mode].ap}

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_thresh,
            "modes": {
                mode: {
                    "ap_by_class": {VEHICLE_CLASS: r.ap},
                    "ap": r.ap,
                    "counts": {"tp": r.tp, "fp": r.fp, "fn": r.fn, "num_gt": r.num_gt},
                    "drop_pct_vs_clear": r.drop_pct_vs_clear,
                    "precision": r.precision,
                    "recall": r.recall,
                }
                for mode, r in self.results.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'condition':<20} {'AP@%.2f' % self.iou_thresh:>8} "
                 f"{'drop':>9} {'tp':>5} {'fp':>5} {'fn':>5}"]
        for mode, r in self.results.items():
            drop = "--" if r.drop_pct_vs_clear is None else f"{r.drop_pct_vs_clear:+.2f}%"
            lines.append(f"{mode:<20} {r.ap:>8.4f} {drop:>9} "
                         f"{r.tp:>5} {r.fp:>5} {r.fn:>5}")
        return "\n".join(lines)


def _corrupt_semantics(channels: np.ndarray, rng) -> None:
    """Noise + zeroing on the semantic channels of occupied cells."""
    occupied = channels[9] > 0
    n = int(occupied.sum())
    if n == 0:
        return
    zero = rng.random(n) < SEMANTIC_ZERO_FRAC
    flip = (~zero) & (rng.random(n) < SEMANTIC_NOISE_RATE)
    random_channel = rng.integers(0, NUM_SEMANTIC, size=n)
    sem = channels[CH_SEMANTIC][:, occupied]
    sem[:, zero] = 0.0
    flip_idx = np.flatnonzero(flip)
    sem[:, flip_idx] = 0.0
    sem[random_channel[flip_idx], flip_idx] = 1.0
    channels[CH_SEMANTIC][:, occupied] = sem


def encode_for_mode(frame, calib, grid, norm, mode: str, seed: int) -> np.ndarray:
    """Encode one frame under an eval condition; seeded per frame so frame
    order and parallelism cannot change the result."""
    if mode == "clear":
        return encode_frame(frame, calib, grid, norm)
    if mode == "radar-only":
        return encode_frame(frame, calib, grid, norm, radar_only=True)
    if mode == "corrupt-semantics":
        channels = encode_frame(frame, calib, grid, norm).copy()
        _corrupt_semantics(channels, np.random.default_rng(seed))
        return channels
    if mode == "corrupt-radar":
        channels = encode_frame(frame, calib, grid, norm).copy()
        channels[NUM_SEMANTIC:] = 0.0
        return channels
    if mode.startswith("weather:"):
        kind = mode.split(":", 1)[1]
        if kind not in WEATHER_MASK_SEVERITY:
            raise ConfigError(f"unknown weather kind {kind!r}")
        if frame.mask is None:
            raise ConfigError("weather modes need frames with masks")
        noise, blobs = WEATHER_MASK_SEVERITY[kind]
        degraded = degrade_mask(frame.mask, noise, blobs, seed=seed)
        from .dataset import Frame

        return encode_frame(Frame(frame.cloud, degraded, frame.labels),
                            calib, grid, norm)
    raise ConfigError(f"unknown eval mode {mode!r}")


def _frame_seed(seed: int, frame_index: int) -> int:
    from .dataset import derive_seed

    return derive_seed(seed, frame_index)


def _eval_one_frame(weights: ModelWeights, anchors: AnchorSet, dataset: Dataset,
                    fi: int, mode: str, iou_thresh: float, score_thresh: float,
                    nms_iou: float, seed: int):
    frame = dataset.frames[fi]
    x = encode_for_mode(frame, dataset.calib, dataset.grid, dataset.norm,
                        mode, _frame_seed(seed, fi))
    heads, _ = model_forward(x[None], weights)
    dets = decode_predictions(heads, anchors, score_thresh=score_thresh,
                              nms_iou=nms_iou)
    flags = match_detections(dets, frame.labels, iou_thresh)
    return dets, flags


def _evaluate_mode(weights: ModelWeights, anchors: AnchorSet, dataset: Dataset,
                   mode: str, iou_thresh: float, score_thresh: float,
                   nms_iou: float, seed: int, jobs: int = 1):
    pooled = []  # (-score, frame_idx, det_idx, is_tp)
    num_gt = 0
    per_frame_dets = []
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        task = partial(_eval_one_frame, weights, anchors, dataset,
                       mode=mode, iou_thresh=iou_thresh,
                       score_thresh=score_thresh, nms_iou=nms_iou, seed=seed)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(task, range(len(dataset.frames))))
    else:
        outcomes = [_eval_one_frame(weights, anchors, dataset, fi, mode,
                                    iou_thresh, score_thresh, nms_iou, seed)
                    for fi in range(len(dataset.frames))]
    for fi, (dets, flags) in enumerate(outcomes):
        num_gt += len(dataset.frames[fi].labels)
        per_frame_dets.append(dets)
        for di, (det, flag) in enumerate(zip(dets, flags)):
            pooled.append((-det.score, fi, di, flag))
    pooled.sort()
    flags = [entry[3] for entry in pooled]
    ap = average_precision(flags, num_gt)

    tp = sum(flags)
    if flags:
        tpc = np.cumsum(np.asarray(flags, dtype=np.float64))
        fpc = np.cumsum(~np.asarray(flags, dtype=bool))
        precision = list((tpc / (tpc + fpc)).round(6))
        recall = list((tpc / max(num_gt, 1)).round(6))
    else:
        precision, recall = [], []
    result = ModeResult(ap=ap, tp=int(tp), fp=len(flags) - int(tp),
                        fn=num_gt - int(tp), num_gt=num_gt,
                        precision=[float(p) for p in precision],
                        recall=[float(r) for r in recall])
    return result, per_frame_dets


def run_eval(weights: ModelWeights, anchors: AnchorSet, dataset: Dataset,
             mode="clear", iou_thresh: float = 0.5, score_thresh: float = 0.05,
             nms_iou: float = 0.5, seed: int = 0, jobs: int = 1) -> EvalReport:
    """Evaluate one or more conditions; drops are reported against clear.

    The evaluation protocol decodes at a permissive score threshold so the
    precision-recall curve covers high recall, and suppresses at IoU 0.5
    (matching the AP threshold) so imperfect near-duplicates cannot shadow
    a better-localized box.
    """
    if not dataset.frames:
        raise ValidationError("cannot evaluate an empty dataset")
    modes = [mode] if isinstance(mode, str) else list(mode)
    results: dict[str, ModeResult] = {}
    for m in modes:
        results[m], _ = _evaluate_mode(weights, anchors, dataset, m,
                                       iou_thresh, score_thresh, nms_iou, seed,
                                       jobs=jobs)
    clear_ap = results.get("clear").ap if "clear" in results else None
    for m, r in results.items():
        if m != "clear" and clear_ap:
            r.drop_pct_vs_clear = 100.0 * (clear_ap - r.ap) / clear_ap
    return EvalReport(iou_thresh, results)


def predict_frame(weights: ModelWeights, anchors: AnchorSet, dataset: Dataset,
                  frame_index: int, mode: str = "clear",
                  score_thresh: float = 0.3, nms_iou: float = 0.3,
                  seed: int = 0) -> DetectionSet:
    """Decode detections for a single dataset frame (used by the CLI)."""
    frame = dataset.frames[frame_index]
    x = encode_for_mode(frame, dataset.calib, dataset.grid, dataset.norm, mode,
                        _frame_seed(seed, frame_index))
    heads, _ = model_forward(x[None], weights)
    return decode_predictions(heads, anchors, score_thresh=score_thresh,
                              nms_iou=nms_iou)
