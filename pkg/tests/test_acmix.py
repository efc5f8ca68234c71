import math

import numpy as np
import pytest

from acmixkit.acmix import (AcmixParams, AttentionParams, acmix_forward, acmix_path_outputs,
                            conv_as_shift_sum, local_attention_weights, multihead_local_attention,
                            project_qkv)
from acmixkit.tensor import ConvKernel, conv2d_direct, linear_pointwise


def attention_loops(q, k, v, heads, window):
    """Per-pixel, per-head softmax over in-bounds neighbours, in float64."""
    n, c, h, w = q.shape
    d = c // heads
    half = window // 2
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for head in range(heads):
                    sl = slice(head * d, (head + 1) * d)
                    qv = q[b, sl, i, j].astype(np.float64)
                    logits, vals = [], []
                    for a in range(i - half, i + half + 1):
                        for bb in range(j - half, j + half + 1):
                            if 0 <= a < h and 0 <= bb < w:
                                logits.append(float(qv @ k[b, sl, a, bb]) / math.sqrt(d))
                                vals.append(v[b, sl, a, bb].astype(np.float64))
                    m = max(logits)
                    e = [math.exp(z - m) for z in logits]
                    s = sum(e)
                    out[b, sl, i, j] = sum(wt / s * val for wt, val in zip(e, vals))
    return out


class TestConvAsShiftSum:
    @pytest.mark.parametrize("seed", range(25))
    def test_matches_direct(self, seed):
        r = np.random.default_rng(seed)
        c_in, c_out = r.integers(1, 9, size=2)
        h, w = r.integers(1, 17, size=2)
        x = r.standard_normal((1, c_in, h, w)).astype(np.float32)
        kern = ConvKernel(r.standard_normal((c_out, c_in, 3, 3)), r.standard_normal(c_out))
        assert np.abs(conv_as_shift_sum(x, kern) - conv2d_direct(x, kern)).max() <= 1e-5

    def test_k1_is_pointwise(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(conv_as_shift_sum(x, ConvKernel(w[:, :, None, None])),
                                      linear_pointwise(x, w))

    def test_zero_kernel(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        assert not conv_as_shift_sum(x, ConvKernel.zeros(2, 3, 3)).any()

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv_as_shift_sum(np.zeros((1, 2, 3, 3), np.float32), ConvKernel.zeros(1, 3, 3))


class TestLocalAttention:
    def test_window_one_returns_values(self, rng):
        q, k, v = rng.standard_normal((3, 1, 4, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(multihead_local_attention(q, k, v, AttentionParams(2, 1)), v)

    def test_constant_keys_give_window_mean(self, rng):
        q = rng.standard_normal((1, 4, 7, 8)).astype(np.float32)
        k = np.broadcast_to(rng.standard_normal((1, 4, 1, 1)), q.shape).astype(np.float32)
        v = rng.standard_normal((1, 4, 7, 8)).astype(np.float32)
        out = multihead_local_attention(q, k, v, AttentionParams(2, 3))
        for i in range(1, 6):
            for j in range(1, 7):
                mean = v[0, :, i - 1:i + 2, j - 1:j + 2].mean(axis=(1, 2))
                np.testing.assert_allclose(out[0, :, i, j], mean, atol=1e-5)
        wts = local_attention_weights(q, k, AttentionParams(2, 3))
        np.testing.assert_allclose(wts[..., 1:-1, 1:-1], 1 / 9, atol=1e-6)

    def test_weights_normalized_and_padding_excluded(self, rng):
        q, k = rng.standard_normal((2, 2, 6, 5, 4)).astype(np.float32)
        wts = local_attention_weights(q, k, AttentionParams(3, 3))
        np.testing.assert_allclose(wts.sum(axis=2), 1.0, atol=1e-6)
        # Offset (-1, -1) is index 0; it points outside the image on row 0 and column 0.
        assert (wts[:, :, 0, 0, :] == 0).all() and (wts[:, :, 0, :, 0] == 0).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        heads = int(r.integers(1, 4))
        c = heads * int(r.integers(1, 3))
        q, k, v = r.standard_normal((3, 2, c, 5, 6)).astype(np.float32)
        for window in (3, 5):
            out = multihead_local_attention(q, k, v, AttentionParams(heads, window))
            np.testing.assert_allclose(out, attention_loops(q, k, v, heads, window), atol=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            AttentionParams(2, 4)
        q = np.zeros((1, 6, 3, 3), np.float32)
        with pytest.raises(ValueError):
            multihead_local_attention(q, q, q, AttentionParams(4, 3))


def make_params(seed, c=8, heads=4, alpha=1.0, beta=1.0):
    return AcmixParams.init(np.random.default_rng(seed), c, heads, 3, alpha, beta)


class TestAcmix:
    def test_shape_preserved(self, rng):
        for c, heads in ((4, 4), (8, 2), (12, 3)):
            x = rng.standard_normal((2, c, 5, 7)).astype(np.float32)
            assert acmix_forward(x, make_params(0, c, heads)).shape == x.shape

    def test_degenerate_mixes(self, rng):
        x = rng.standard_normal((1, 8, 6, 6)).astype(np.float32)
        p = make_params(1)
        f_att, f_conv = acmix_path_outputs(x, p)
        p.alpha, p.beta = 1.0, 0.0
        np.testing.assert_array_equal(acmix_forward(x, p), f_att)
        p.alpha, p.beta = 0.0, 1.0
        np.testing.assert_array_equal(acmix_forward(x, p), f_conv)
        p.alpha, p.beta = 0.0, 0.0
        assert not acmix_forward(x, p).any()

    def test_alpha_difference_is_attention_path(self, rng):
        x = rng.standard_normal((1, 8, 6, 6)).astype(np.float32)
        p = make_params(2)
        f_att, _ = acmix_path_outputs(x, p)
        p.alpha = 2.0
        two = acmix_forward(x, p)
        p.alpha = 1.0
        one = acmix_forward(x, p)
        # float32 rounding of the sums is the only gap
        np.testing.assert_allclose(two - one, f_att, atol=1e-6)
        p.beta = 0.0
        p.alpha = 2.0
        two = acmix_forward(x, p)
        p.alpha = 1.0
        np.testing.assert_array_equal(two - acmix_forward(x, p), f_att)

    def test_recombination(self, rng):
        x = rng.standard_normal((1, 8, 5, 5)).astype(np.float32)
        p = make_params(3, alpha=0.7, beta=-1.3)
        f_att, f_conv = acmix_path_outputs(x, p)
        np.testing.assert_allclose(acmix_forward(x, p), np.float32(0.7) * f_att + np.float32(-1.3) * f_conv,
                                   atol=1e-6)

    def test_conv_path_reproduces_standard_conv(self, rng):
        c = 4
        x = rng.standard_normal((1, c, 7, 6)).astype(np.float32)
        kern = rng.standard_normal((c, c, 3, 3)).astype(np.float32)
        fc = np.zeros((9 * c, 3 * c), np.float32)
        for p_ in range(3):
            for q_ in range(3):
                g = p_ * 3 + q_
                fc[g * c:(g + 1) * c, :c] = kern[:, :, p_, q_]
        eye = np.eye(c)
        params = AcmixParams(eye, eye, eye, fc, AttentionParams(4, 3), alpha=0.0, beta=1.0)
        out = acmix_forward(x, params)
        assert np.abs(out - conv2d_direct(x, ConvKernel(kern))).max() <= 1e-5

    def test_projections_computed_once(self, rng, monkeypatch):
        import acmixkit.acmix as mod

        calls = []
        real = mod.project_qkv
        monkeypatch.setattr(mod, "project_qkv", lambda x, p: calls.append(1) or real(x, p))
        mod.acmix_forward(rng.standard_normal((1, 8, 4, 4)).astype(np.float32), make_params(0))
        assert len(calls) == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            AcmixParams.init(np.random.default_rng(0), 6, heads=4)
        p = make_params(0)
        with pytest.raises(ValueError):
            AcmixParams(p.proj_q, p.proj_k, p.proj_v, p.conv_fc[:-1], p.attn)
        with pytest.raises(ValueError):
            project_qkv(np.zeros((1, 4, 3, 3), np.float32), p)
