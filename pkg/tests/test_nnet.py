import numpy as np
import pytest

import spgfuse.nnet as nnet
from spgfuse.errors import FormatError, ShapeError, ValidationError
from spgfuse.nnet import (
    AdamState,
    GradCheckReport,
    HeadOutputs,
    ModelConfig,
    ModelWeights,
    TrainConfig,
    adam_step,
    conv_backward,
    conv_forward,
    gradient_check,
    init_weights,
    load_checkpoint,
    model_backward,
    model_forward,
    save_checkpoint,
    tconv_backward,
    tconv_forward,
)

TINY = ModelConfig(in_channels=4, stage_widths=(6, 8, 10), convs_per_stage=1,
                   anchors_per_cell=2)


def finite_diff(fn, arr, eps=1e-6):
    """Central differences of a scalar-valued fn w.r.t. every entry of arr."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = arr[idx]
        arr[idx] = saved + eps
        lp = fn()
        arr[idx] = saved - eps
        lm = fn()
        arr[idx] = saved
        grad[idx] = (lp - lm) / (2 * eps)
        it.iternext()
    return grad


class TestConvLayer:
    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
    def test_gradients_match_finite_differences(self, stride, pad, k):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, k, k)) * 0.5
        b = rng.normal(size=4)
        # Random projection makes the output a scalar for differencing.
        out0, cache = conv_forward(x, w, b, stride, pad)
        proj = rng.normal(size=out0.shape)

        def loss():
            out, _ = conv_forward(x, w, b, stride, pad)
            return float((out * proj).sum())

        dx, dw, db = conv_backward(proj.astype(np.float64), cache)
        np.testing.assert_allclose(dx, finite_diff(loss, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(dw, finite_diff(loss, w), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, finite_diff(loss, b), rtol=1e-6, atol=1e-8)

    def test_bias_gradient_is_spatial_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = np.zeros(4)
        _out, cache = conv_forward(x, w, b, 1, 1)
        dout = rng.normal(size=(2, 4, 5, 5))
        _dx, _dw, db = conv_backward(dout, cache)
        np.testing.assert_allclose(db, dout.sum(axis=(0, 2, 3)), rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 5, 3, 3)), np.zeros(2), 1, 1)


class TestTconvLayer:
    def test_doubles_resolution(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(3, 5, 2, 2))
        out, _ = tconv_forward(x, w, np.zeros(5))
        assert out.shape == (1, 5, 8, 8)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(3, 4, 2, 2)) * 0.5
        b = rng.normal(size=4)
        out0, cache = tconv_forward(x, w, b)
        proj = rng.normal(size=out0.shape)

        def loss():
            out, _ = tconv_forward(x, w, b)
            return float((out * proj).sum())

        dx, dw, db = tconv_backward(proj.astype(np.float64), cache)
        np.testing.assert_allclose(dx, finite_diff(loss, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(dw, finite_diff(loss, w), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, finite_diff(loss, b), rtol=1e-6, atol=1e-8)


class TestModelForward:
    def test_zero_weights_zero_outputs(self):
        weights = init_weights(TINY, seed=0)
        for name in weights.params:
            weights.params[name][:] = 0.0
        x = np.random.default_rng(0).normal(size=(1, 4, 8, 8)).astype(np.float32)
        heads, _ = model_forward(x, weights)
        assert not heads.cls.any()
        assert not heads.reg.any()

    def test_output_shapes(self):
        cfg = ModelConfig(in_channels=22, stage_widths=(8, 10, 12, 14),
                          convs_per_stage=1, anchors_per_cell=2)
        weights = init_weights(cfg, seed=1)
        x = np.random.default_rng(1).normal(size=(1, 22, 32, 32)).astype(np.float32)
        heads, _ = model_forward(x, weights)
        assert heads.cls.shape == (1, 2, 32, 32)
        assert heads.reg.shape == (1, 12, 32, 32)

    def test_resolution_preserved_for_other_sizes(self):
        weights = init_weights(TINY, seed=2)
        for hw in (8, 12, 16):
            x = np.zeros((1, 4, hw, hw), dtype=np.float32)
            heads, _ = model_forward(x, weights)
            assert heads.cls.shape[-2:] == (hw, hw)

    def test_deterministic(self):
        weights = init_weights(TINY, seed=3)
        x = np.random.default_rng(5).normal(size=(2, 4, 8, 8)).astype(np.float32)
        a, _ = model_forward(x, weights)
        b, _ = model_forward(x, weights)
        assert a.cls.tobytes() == b.cls.tobytes()
        assert a.reg.tobytes() == b.reg.tobytes()

    def test_shape_errors_name_layer(self):
        weights = init_weights(TINY, seed=0)
        with pytest.raises(ShapeError, match="input"):
            model_forward(np.zeros((1, 3, 8, 8), np.float32), weights)
        with pytest.raises(ShapeError, match="input"):
            model_forward(np.zeros((1, 4, 6, 6), np.float32), weights)


class TestModelBackward:
    def test_zero_upstream_zero_grads(self):
        weights = init_weights(TINY, seed=4)
        x = np.random.default_rng(6).normal(size=(1, 4, 8, 8)).astype(np.float32)
        heads, cache = model_forward(x, weights)
        grads, dx = model_backward(
            HeadOutputs(np.zeros_like(heads.cls), np.zeros_like(heads.reg)), cache)
        assert set(grads) == set(weights.params)
        for g in grads.values():
            assert not g.any()
        assert not dx.any()

    def test_cache_single_use(self):
        weights = init_weights(TINY, seed=4)
        x = np.zeros((1, 4, 8, 8), np.float32)
        heads, cache = model_forward(x, weights)
        zero = HeadOutputs(np.zeros_like(heads.cls), np.zeros_like(heads.reg))
        model_backward(zero, cache)
        with pytest.raises(ValidationError, match="consumed"):
            model_backward(zero, cache)

    def test_full_model_matches_finite_differences(self):
        # Scalar projection loss over both heads; float64 end to end.
        rng = np.random.default_rng(7)
        weights = init_weights(TINY, seed=5).astype(np.float64)
        x = rng.normal(size=(1, 4, 8, 8))
        heads0, cache = model_forward(x, weights)
        proj_c = rng.normal(size=heads0.cls.shape)
        proj_r = rng.normal(size=heads0.reg.shape)
        grads, _ = model_backward(HeadOutputs(proj_c, proj_r), cache)

        def loss():
            h, _ = model_forward(x, weights)
            return float((h.cls * proj_c).sum() + (h.reg * proj_r).sum())

        eps = 1e-5
        checked = 0
        for name in ("stem.w", "enc1.down.w", "enc2.conv1.w", "dec2.up.w",
                     "dec1.conv1.w", "head.cls.w", "head.reg.b", "enc1.down.b"):
            p = weights.params[name]
            flat_choices = np.random.default_rng(checked).choice(p.size, size=min(6, p.size),
                                                                 replace=False)
            for flat in flat_choices:
                idx = np.unravel_index(flat, p.shape)
                saved = p[idx]
                p[idx] = saved + eps
                lp = loss()
                p[idx] = saved - eps
                lm = loss()
                p[idx] = saved
                numeric = (lp - lm) / (2 * eps)
                analytic = grads[name][idx]
                assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6), \
                    f"{name}{idx}: analytic {analytic} vs numeric {numeric}"
                checked += 1
        assert checked > 30


class TestAdam:
    def test_zero_gradient_no_decay_is_identity(self):
        weights = init_weights(TINY, seed=8)
        state = AdamState.for_weights(weights)
        grads = {k: np.zeros_like(v) for k, v in weights.params.items()}
        cfg = TrainConfig(weight_decay=0.0)
        new_w, new_state = adam_step(weights, grads, state, cfg)
        for k in weights.params:
            np.testing.assert_array_equal(new_w.params[k], weights.params[k])
        assert new_state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        # At t=1 with moment bias correction, update = lr * g / (|g| + eps).
        weights = init_weights(TINY, seed=9)
        state = AdamState.for_weights(weights)
        rng = np.random.default_rng(1)
        grads = {k: rng.normal(size=v.shape).astype(np.float32)
                 for k, v in weights.params.items()}
        cfg = TrainConfig(learning_rate=0.001, weight_decay=0.0)
        new_w, _ = adam_step(weights, grads, state, cfg)
        for k, g in grads.items():
            delta = new_w.params[k] - weights.params[k]
            expected = -cfg.learning_rate * np.sign(g)
            mask = np.abs(g) > 1e-3  # away from the eps regime
            np.testing.assert_allclose(delta[mask], expected[mask], rtol=1e-3)

    def test_weight_decay_shrinks_parameters(self):
        weights = init_weights(TINY, seed=10)
        state = AdamState.for_weights(weights)
        grads = {k: np.zeros_like(v) for k, v in weights.params.items()}
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        new_w, _ = adam_step(weights, grads, state, cfg)
        w0 = weights.params["stem.w"]
        np.testing.assert_allclose(new_w.params["stem.w"], w0 * (1 - 0.1 * 0.5), rtol=1e-6)

    def test_missing_gradient_rejected(self):
        weights = init_weights(TINY, seed=8)
        with pytest.raises(ValidationError):
            adam_step(weights, {}, AdamState.for_weights(weights), TrainConfig())


class TestCheckpoint:
    def test_round_trip(self):
        weights = init_weights(TINY, seed=11)
        blob = save_checkpoint(weights)
        assert blob[:4] == b"RSN1"
        back = load_checkpoint(blob)
        assert back.config == TINY
        assert set(back.params) == set(weights.params)
        for k in weights.params:
            np.testing.assert_array_equal(back.params[k], weights.params[k])
        assert save_checkpoint(back) == blob

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_checkpoint(b"XXXX" + bytes(4))

    def test_trailing_garbage(self):
        blob = save_checkpoint(init_weights(TINY, seed=0)) + b"!"
        with pytest.raises(FormatError):
            load_checkpoint(blob)


class TestGradientCheck:
    def test_small_model_passes(self):
        weights = init_weights(TINY, seed=12)
        x = np.random.default_rng(13).normal(size=(1, 4, 8, 8))
        report = gradient_check(weights, x, max_samples=120, seed=0)
        assert report.checked > 50
        assert report.passed(1e-4), (report.max_rel_err, report.worst_parameter)

    def test_corrupted_backward_flags_layer(self, monkeypatch):
        weights = init_weights(TINY, seed=14)
        x = np.random.default_rng(15).normal(size=(1, 4, 8, 8))
        real_backward = nnet.model_backward

        def corrupted(grads_out, cache):
            grads, dx = real_backward(grads_out, cache)
            grads["enc1.down.w"] = -grads["enc1.down.w"]
            return grads, dx

        monkeypatch.setattr(nnet, "model_backward", corrupted)
        report = gradient_check(weights, x, max_samples=250, seed=1)
        assert not report.passed(1e-4)
        assert report.worst_parameter == "enc1.down.w"

    def test_degenerate_zero_case_is_finite(self):
        weights = init_weights(TINY, seed=0)
        for name in weights.params:
            weights.params[name][:] = 0.0
        report = gradient_check(weights, np.zeros((1, 4, 8, 8)), max_samples=60, seed=2)
        assert np.isfinite(report.max_rel_err)


class TestConfigInference:
    def test_four_stage_variant(self):
        cfg = ModelConfig.for_stages(4)
        assert cfg.stages == 4
        assert cfg.convs_per_stage == 3
        weights = init_weights(cfg, seed=0)
        blob = save_checkpoint(weights)
        assert load_checkpoint(blob).config == cfg

    def test_desk_scale_default(self):
        cfg = ModelConfig.for_stages(3)
        assert cfg.stages == 3
        assert cfg.convs_per_stage == 1
