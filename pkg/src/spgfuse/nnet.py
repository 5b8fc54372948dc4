"""Self-contained encoder-decoder network with exact reverse-mode gradients.

The backbone downsamples the 22-channel BEV grid through ``S`` stride-2
stages and mirrors back up with transposed convolutions, concatenating the
matching encoder feature at each resolution (skip connections).  Two 1x1
heads emit per-cell anchor classification logits (A channels) and box
regression values (6A channels) at input resolution.

Everything runs on plain numpy: forward, backward, Adam updates with
decoupled weight decay, checkpointing, and finite-difference verification.
Training uses float32; gradient checks run the whole stack in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"RSN1"
REGRESSION_DIMS = 6


# ---------------------------------------------------------------------------
# layer primitives


def conv_forward(x, w, b, stride=1, pad=0):
    """im2col convolution; returns (output, cache) with cache reused by backward."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv", f"input has {c} channels, kernel expects {cw}")
    if pad:
        x_p = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        x_p = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    win = sliding_window_view(x_p, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    cache = (cols, x.shape, w, stride, pad, (ho, wo))
    return out, cache


def conv_backward(dout, cache):
    cols, x_shape, w, stride, pad, (ho, wo) = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx_p = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dx_p[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    dx = dx_p[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw, db


def tconv_forward(x, w, b):
    """Transposed convolution, kernel 2 stride 2 (exact 2x upsampling)."""
    n, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError("tconv", f"input has {cin} channels, kernel expects {cin_w}")
    out = np.empty((n, cout, 2 * h, 2 * wd), dtype=x.dtype)
    for ki in range(2):
        for kj in range(2):
            out[:, :, ki::2, kj::2] = np.tensordot(
                x, w[:, :, ki, kj], axes=([1], [0])).transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out, (x, w)


def tconv_backward(dout, cache):
    x, w = cache
    cin, cout = w.shape[:2]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for ki in range(2):
        for kj in range(2):
            d_sub = dout[:, :, ki::2, kj::2]
            dx += np.tensordot(d_sub, w[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
            dw[:, :, ki, kj] = np.tensordot(x, d_sub, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# ---------------------------------------------------------------------------
# model definition


@dataclass(frozen=True)
class ModelConfig:
    """Backbone layout: stage widths (stem plus one per downsampling stage).

    ``cls_prior`` seeds the classification head bias with the background
    prior (logit of the expected positive-anchor rate), which keeps the
    focal loss from spending its early steps suppressing a sea of
    half-confident negatives.
    """

    in_channels: int = 22
    stage_widths: tuple[int, ...] = (16, 24, 32, 48)
    convs_per_stage: int = 1
    anchors_per_cell: int = 2
    cls_prior: float = 0.01
    head_init_scale: float = 0.1

    def __post_init__(self):
        if len(self.stage_widths) < 2:
            raise ConfigError("need a stem width plus at least one stage width")
        if self.convs_per_stage < 1:
            raise ConfigError("convs_per_stage must be >= 1")
        if self.anchors_per_cell < 1:
            raise ConfigError("anchors_per_cell must be >= 1")
        if not (0.0 < self.cls_prior < 1.0):
            raise ConfigError("cls_prior must be in (0, 1)")
        if self.head_init_scale < 0:
            raise ConfigError("head_init_scale must be >= 0")

    @property
    def stages(self) -> int:
        return len(self.stage_widths) - 1

    @classmethod
    def for_stages(cls, stages: int, in_channels: int = 22,
                   anchors_per_cell: int = 2) -> "ModelConfig":
        """Desk-scale defaults: 3 stages with single extra convs, or the
        deeper 4-stage / 3-convs-per-stage layout."""
        widths = (16, 24, 32, 48, 64)[:stages + 1]
        if len(widths) != stages + 1:
            raise ConfigError(f"no default widths for {stages} stages")
        convs = 3 if stages >= 4 else 1
        return cls(in_channels=in_channels, stage_widths=widths,
                   convs_per_stage=convs, anchors_per_cell=anchors_per_cell)


@dataclass
class ModelWeights:
    params: dict[str, np.ndarray]
    config: ModelConfig

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights({k: v.astype(dtype) for k, v in self.params.items()},
                            self.config)

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.params.items()}, self.config)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class HeadOutputs:
    """Per-cell anchor maps: cls (N, A, H, W) logits, reg (N, 6A, H, W)."""

    cls: np.ndarray
    reg: np.ndarray


@dataclass
class ForwardCache:
    records: list
    input_shape: tuple
    consumed: bool = False

    def branch_signature(self) -> bytes:
        """Packed ReLU activation pattern; used to detect kink crossings."""
        parts = []
        for kind, _name, payload in self.records:
            if kind == "relu":
                parts.append(np.packbits(payload).tobytes())
        return b"".join(parts)


def _kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Kaiming-uniform conv kernels; creation order is fixed.

    Biases start at zero except the classification head, which starts at
    the background-prior logit so anchors begin near ``cls_prior``.  Both
    head kernels are additionally shrunk by ``head_init_scale``: starting
    the heads near zero means early boxes stay close to their anchors and
    early scores close to the prior, which keeps the focal loss from
    chasing initialization noise.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k):
        params[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    def tconv(name, cin, cout):
        params[f"{name}.w"] = _kaiming_uniform(rng, (cin, cout, 2, 2), cin * 4)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    widths = config.stage_widths
    conv("stem", widths[0], config.in_channels, 3)
    for i in range(1, config.stages + 1):
        conv(f"enc{i}.down", widths[i], widths[i - 1], 3)
        for j in range(1, config.convs_per_stage + 1):
            conv(f"enc{i}.conv{j}", widths[i], widths[i], 3)
    for i in range(config.stages, 0, -1):
        tconv(f"dec{i}.up", widths[i], widths[i - 1])
        conv(f"dec{i}.conv1", widths[i - 1], 2 * widths[i - 1], 3)
        for j in range(2, config.convs_per_stage + 1):
            conv(f"dec{i}.conv{j}", widths[i - 1], widths[i - 1], 3)
    a = config.anchors_per_cell
    conv("head.cls", a, widths[0], 1)
    conv("head.reg", REGRESSION_DIMS * a, widths[0], 1)
    scale = np.float32(config.head_init_scale)
    params["head.cls.w"] *= scale
    params["head.reg.w"] *= scale
    prior = config.cls_prior
    params["head.cls.b"][:] = math.log(prior / (1.0 - prior))
    return ModelWeights(params, config)


def model_forward(x: np.ndarray, weights: ModelWeights):
    """Run the backbone and heads; returns (HeadOutputs, ForwardCache)."""
    cfg = weights.config
    p = weights.params
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError("input", f"expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError("input", f"{c} channels, model expects {cfg.in_channels}")
    div = 2 ** cfg.stages
    if h % div or w % div or h < div or w < div:
        raise ShapeError("input", f"spatial dims {h}x{w} not divisible by 2^{cfg.stages}")
    x = x.astype(weights.dtype, copy=False)

    records = []

    def run_conv(name, t, stride=1, pad=1):
        out, cache = conv_forward(t, p[f"{name}.w"], p[f"{name}.b"], stride, pad)
        records.append(("conv", name, cache))
        return out

    def run_relu(t):
        out, mask = relu_forward(t)
        records.append(("relu", None, mask))
        return out

    feats = [run_relu(run_conv("stem", x))]
    for i in range(1, cfg.stages + 1):
        t = run_relu(run_conv(f"enc{i}.down", feats[-1], stride=2))
        for j in range(1, cfg.convs_per_stage + 1):
            t = run_relu(run_conv(f"enc{i}.conv{j}", t))
        feats.append(t)

    t = feats[-1]
    for i in range(cfg.stages, 0, -1):
        name = f"dec{i}.up"
        up, cache = tconv_forward(t, p[f"{name}.w"], p[f"{name}.b"])
        records.append(("tconv", name, cache))
        up = run_relu(up)
        t = np.concatenate([up, feats[i - 1]], axis=1)
        records.append(("concat", i, up.shape[1]))
        for j in range(1, cfg.convs_per_stage + 1):
            t = run_relu(run_conv(f"dec{i}.conv{j}", t))

    cls = run_conv("head.cls", t, pad=0)
    reg = run_conv("head.reg", t, pad=0)
    return HeadOutputs(cls, reg), ForwardCache(records, x.shape)


def model_backward(grads_out: HeadOutputs, cache: ForwardCache):
    """Exact gradients for every parameter plus the input gradient.

    Must be fed the cache of the matching forward pass; a cache can be
    consumed only once.  Returns (dict of parameter gradients, d input).
    """
    if cache.consumed:
        raise ValidationError("forward cache already consumed; rerun model_forward")
    cache.consumed = True

    records = list(cache.records)
    grads: dict[str, np.ndarray] = {}

    # The tape ends with the two head convs; they take separate upstream
    # gradients and their input gradients sum.
    kind, name, c_reg = records.pop()
    if kind != "conv" or name != "head.reg":
        raise ValidationError("cache does not end with the regression head")
    d_reg = np.asarray(grads_out.reg, dtype=c_reg[2].dtype)
    if d_reg.shape[1] != c_reg[2].shape[0]:
        raise ShapeError("head.reg", f"gradient has {d_reg.shape[1]} channels, "
                                     f"head produces {c_reg[2].shape[0]}")
    dt, dw, db = conv_backward(d_reg, c_reg)
    grads["head.reg.w"], grads["head.reg.b"] = dw, db

    kind, name, c_cls = records.pop()
    if kind != "conv" or name != "head.cls":
        raise ValidationError("cache is missing the classification head")
    d_cls = np.asarray(grads_out.cls, dtype=c_cls[2].dtype)
    if d_cls.shape[1] != c_cls[2].shape[0]:
        raise ShapeError("head.cls", f"gradient has {d_cls.shape[1]} channels, "
                                     f"head produces {c_cls[2].shape[0]}")
    d_cls_t, dw, db = conv_backward(d_cls, c_cls)
    grads["head.cls.w"], grads["head.cls.b"] = dw, db
    dt = dt + d_cls_t

    # Generic reverse walk.  "concat" stashes the gradient of the encoder
    # skip feature; it is merged back in right after the stride-2 down conv
    # of the stage that consumed that feature.
    skip_grads: dict[int, np.ndarray] = {}
    for kind, name, payload in reversed(records):
        if kind == "relu":
            dt = relu_backward(dt, payload)
        elif kind == "conv":
            dt, dw, db = conv_backward(dt, payload)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
            if name.startswith("enc") and name.endswith(".down"):
                level = int(name[3:name.index(".")]) - 1
                if level in skip_grads:
                    dt = dt + skip_grads.pop(level)
        elif kind == "tconv":
            dt, dw, db = tconv_backward(dt, payload)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        elif kind == "concat":
            stage, split = name, payload
            skip_grads[stage - 1] = dt[:, split:]
            dt = np.ascontiguousarray(dt[:, :split])
        else:  # pragma: no cover - defensive
            raise ValidationError(f"unknown cache record {kind}")
    return grads, dt


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    batch_size: int = 2
    seed: int = 0
    max_steps: int = 1000
    stages: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_weights(cls, weights: ModelWeights) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in weights.params.items()},
                   v={k: np.zeros_like(p) for k, p in weights.params.items()})


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(weights: ModelWeights, grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig):
    """One Adam update with decoupled multiplicative weight decay.

    Functional: returns fresh (ModelWeights, AdamState); the inputs are not
    mutated, so caches built from the old weights stay valid.
    """
    missing = set(weights.params) - set(grads)
    if missing:
        raise ValidationError(f"gradients missing for parameters: {sorted(missing)}")
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    lr = np.float32(cfg.learning_rate)
    decay = np.float32(1.0 - cfg.learning_rate * cfg.weight_decay)
    new_params, new_m, new_v = {}, {}, {}
    for name, p in weights.params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if g.shape != p.shape:
            raise ShapeError(name, f"gradient shape {g.shape} != parameter {p.shape}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = (p * decay - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)
        new_m[name], new_v[name] = m.astype(p.dtype), v.astype(p.dtype)
    return ModelWeights(new_params, weights.config), AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(weights: ModelWeights) -> bytes:
    """Serialize parameters: magic, count, then {name, ndim, dims, f32 data}."""
    blobs = [CHECKPOINT_MAGIC, struct.pack("<I", len(weights.params))]
    for name, p in weights.params.items():
        nb = name.encode("utf-8")
        blobs.append(struct.pack("<H", len(nb)))
        blobs.append(nb)
        blobs.append(struct.pack("<B", p.ndim))
        blobs.append(struct.pack(f"<{p.ndim}I", *p.shape))
        blobs.append(p.astype("<f4").tobytes())
    return b"".join(blobs)


def load_checkpoint(data: bytes) -> ModelWeights:
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (count,) = struct.unpack("<I", data[4:8])
    pos = 8
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", data[pos:pos + 2]); pos += 2
        name = data[pos:pos + nlen].decode("utf-8"); pos += nlen
        (ndim,) = struct.unpack("<B", data[pos:pos + 1]); pos += 1
        dims = struct.unpack(f"<{ndim}I", data[pos:pos + 4 * ndim]); pos += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data[pos:pos + 4 * size], dtype="<f4").reshape(dims).copy()
        pos += 4 * size
        params[name] = arr
    if pos != len(data):
        raise FormatError(f"trailing bytes in checkpoint ({len(data) - pos})")
    return ModelWeights(params, _infer_config(params))


def _infer_config(params: dict[str, np.ndarray]) -> ModelConfig:
    """Reconstruct the layout from parameter names and shapes."""
    try:
        stem = params["stem.w"]
        stages = max(int(k[3:k.index(".")]) for k in params if k.startswith("enc"))
        widths = [stem.shape[0]] + [params[f"enc{i}.down.w"].shape[0]
                                    for i in range(1, stages + 1)]
        convs = max(int(k.split("conv")[1].split(".")[0])
                    for k in params if ".conv" in k and k.endswith(".w"))
        anchors = params["head.cls.w"].shape[0]
    except (KeyError, ValueError) as e:
        raise FormatError(f"checkpoint does not describe a known layout: {e}") from e
    if params["head.reg.w"].shape[0] != REGRESSION_DIMS * anchors:
        raise FormatError("regression head width inconsistent with anchor count")
    return ModelConfig(in_channels=stem.shape[1], stage_widths=tuple(widths),
                       convs_per_stage=convs, anchors_per_cell=anchors)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: str | None
    per_parameter: dict[str, float]
    checked: int
    skipped_nondifferentiable: int

    def passed(self, tolerance: float) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err <= tolerance


def _check_loss(weights: ModelWeights, x, labels, reg_targets, loss_params):
    """Detection loss plus a branch signature for kink detection."""
    from . import detect

    heads, cache = model_forward(x, weights)
    loss, (d_cls, d_reg), branch = detect.total_loss_with_branches(
        heads, labels, reg_targets, loss_params)
    sig = cache.branch_signature() + branch
    return loss, (d_cls, d_reg), cache, sig


def gradient_check(weights: ModelWeights, x: np.ndarray, *,
                   loss_params=None, eps: float = 1e-4,
                   max_samples: int = 400, seed: int = 0,
                   positive_rate: float = 0.1) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs the full detection loss in float64.  Parameters are sampled down
    to ``max_samples`` scalar entries (seeded) when the model is larger.
    Entries whose +/-eps perturbation flips any activation branch (ReLU
    sign, loss-branch membership) are skipped: the function is not
    differentiable across those points, so a finite difference there checks
    nothing.  Failures are reported, never raised.
    """
    from . import detect

    if loss_params is None:
        loss_params = detect.LossParams()
    w64 = weights.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    cfg = weights.config
    n, _, h, wd = x64.shape
    a = cfg.anchors_per_cell
    labels = rng.random((n, a, h, wd)) < positive_rate
    reg_targets = rng.normal(0.0, 0.5, size=(n, a, h, wd, REGRESSION_DIMS))

    loss0, (d_cls, d_reg), cache, base_sig = _check_loss(
        w64, x64, labels, reg_targets, loss_params)
    analytic, _ = model_backward(HeadOutputs(d_cls, d_reg), cache)

    names = list(w64.params)
    sizes = np.array([w64.params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if total <= max_samples:
        candidates = np.arange(total)
    else:
        candidates = rng.choice(total, size=min(3 * max_samples, total), replace=False)

    per_param: dict[str, float] = {}
    checked = skipped = 0
    max_rel = 0.0
    worst = None
    for flat in candidates:
        if checked >= max_samples:
            break
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[pi]
        idx = np.unravel_index(int(flat - offsets[pi]), w64.params[name].shape)
        saved = w64.params[name][idx]

        w64.params[name][idx] = saved + eps
        lp, _, cache_p, sig_p = _check_loss(w64, x64, labels, reg_targets, loss_params)
        w64.params[name][idx] = saved - eps
        lm, _, cache_m, sig_m = _check_loss(w64, x64, labels, reg_targets, loss_params)
        w64.params[name][idx] = saved
        if sig_p != base_sig or sig_m != base_sig:
            skipped += 1
            continue
        numeric = (lp - lm) / (2.0 * eps)
        ana = float(analytic[name][idx])
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        per_param[name] = max(per_param.get(name, 0.0), rel)
        checked += 1
        if rel > max_rel:
            max_rel, worst = rel, name
    return GradCheckReport(max_rel_err=max_rel, worst_parameter=worst,
                           per_parameter=per_param, checked=checked,
                           skipped_nondifferentiable=skipped)
