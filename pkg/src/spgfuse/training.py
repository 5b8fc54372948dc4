"""Training loop gluing encoding, target assignment, the network and Adam.

Training is a pure function of (frames, config): weight init, batch order
and every update are derived from the config seed, so reruns produce
byte-identical checkpoints.  Radar-only models additionally start with the
stem weights of the semantic input channels at exactly zero; those inputs
are zeroed during encoding, the weights receive no gradient, and the model
is therefore structurally blind to the semantic channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Frame
from .detect import (
    DEFAULT_ORIENTATIONS,
    AnchorSet,
    LossParams,
    assign_targets,
    loss_breakdown,
    make_anchors,
)
from .errors import ValidationError
from .geometry import CalibrationSet
from .nnet import (
    AdamState,
    HeadOutputs,
    ModelConfig,
    ModelWeights,
    TrainConfig,
    adam_step,
    init_weights,
    load_checkpoint,
    model_backward,
    model_forward,
    save_checkpoint,
)
from .spg import NUM_SEMANTIC, GridSpec, NormConfig, assemble_spg

ANCHOR_SIZE_KEY = "anchors.base_size"
ANCHOR_YAW_KEY = "anchors.orientations"


def encode_frame(frame: Frame, calib: CalibrationSet, grid: GridSpec,
                 norm: NormConfig, radar_only: bool = False) -> np.ndarray:
    """One frame to its (22, H, W) float32 grid; radar-only drops the mask."""
    mask = None if radar_only else frame.mask
    spg = assemble_spg(frame.cloud, mask, calib if mask is not None else None,
                       grid, norm)
    return spg.channels


@dataclass
class TrainResult:
    weights: ModelWeights
    anchors: AnchorSet
    history: list  # (step, total, focal, smooth)


def train_detector(frames: list[Frame], calib: CalibrationSet, grid: GridSpec,
                   train_cfg: TrainConfig, loss_params: LossParams | None = None,
                   norm: NormConfig | None = None, radar_only: bool = False,
                   orientations=DEFAULT_ORIENTATIONS,
                   model_config: ModelConfig | None = None,
                   progress=None) -> TrainResult:
    """Fit the detector on the given frames.

    ``progress``, when given, is called as ``progress(step, total_loss)``
    every 50 steps.
    """
    if not frames:
        raise ValidationError("cannot train on an empty frame list")
    loss_params = loss_params or LossParams()
    norm = norm or NormConfig()

    all_labels = [b for f in frames for b in f.labels]
    anchors = make_anchors(grid, all_labels, orientations)
    targets = [assign_targets(anchors, f.labels, loss_params) for f in frames]
    inputs = np.stack([encode_frame(f, calib, grid, norm, radar_only)
                       for f in frames])

    if model_config is None:
        model_config = ModelConfig.for_stages(
            train_cfg.stages, anchors_per_cell=len(orientations))
    weights = init_weights(model_config, train_cfg.seed)
    if radar_only:
        weights.params["stem.w"][:, :NUM_SEMANTIC] = 0.0
    state = AdamState.for_weights(weights)

    rng = np.random.default_rng(train_cfg.seed)
    order: list[int] = []
    history = []
    for step in range(train_cfg.max_steps):
        while len(order) < train_cfg.batch_size:
            order.extend(int(i) for i in rng.permutation(len(frames)))
        idx = [order.pop(0) for _ in range(train_cfg.batch_size)]
        heads, cache = model_forward(inputs[idx], weights)
        total, focal, smooth, (d_cls, d_reg) = loss_breakdown(
            heads, [targets[i] for i in idx], loss_params)
        grads, _ = model_backward(HeadOutputs(d_cls, d_reg), cache)
        weights, state = adam_step(weights, grads, state, train_cfg)
        history.append((step, total, focal, smooth))
        if progress is not None and step % 50 == 0:
            progress(step, total)
    return TrainResult(weights, anchors, history)


def save_detector(result_weights: ModelWeights, anchors: AnchorSet) -> bytes:
    """Checkpoint = network parameters plus the anchor geometry entries."""
    merged = dict(result_weights.params)
    merged[ANCHOR_SIZE_KEY] = np.array([anchors.base_w, anchors.base_l],
                                       dtype=np.float32)
    merged[ANCHOR_YAW_KEY] = np.array(anchors.orientations, dtype=np.float32)
    return save_checkpoint(ModelWeights(merged, result_weights.config))


def load_detector(data: bytes, grid: GridSpec):
    """Restore (weights, anchors); the anchor grid comes from the dataset."""
    loaded = load_checkpoint(data)
    params = dict(loaded.params)
    try:
        base = params.pop(ANCHOR_SIZE_KEY)
        yaws = params.pop(ANCHOR_YAW_KEY)
    except KeyError as e:
        raise ValidationError(f"checkpoint lacks anchor metadata: {e}") from e
    anchors = AnchorSet(float(base[0]), float(base[1]),
                        tuple(float(y) for y in yaws), grid)
    return ModelWeights(params, loaded.config), anchors


def history_csv(history: list) -> str:
    lines = ["step,total,focal,smooth"]
    for step, total, focal, smooth in history:
        lines.append(f"{step},{total!r},{focal!r},{smooth!r}")
    return "\n".join(lines) + "\n"
