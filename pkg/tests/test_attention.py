"""Attention: direct-formula oracles, the per-token sum form, MD-MSA degeneracy and windowing."""

import numpy as np
import pytest

from eatformer import functional as F
from eatformer.attention import (
    DeformableAttention,
    MultiHeadAttention,
    cross_attention,
    md_msa_forward,
    msa_forward,
    msa_sum_form_check,
    windowed_attention,
)
from eatformer.errors import ConfigurationError
from eatformer.gradcheck import check_gradients
from eatformer.tensor import Tensor


def formula_msa(x, p, kv=None):
    """Concatenated heads of softmax(Q K^T / sqrt(d)) V, then the output projection."""
    kv = x if kv is None else kv
    Q = x @ p.q.weight.data + p.q.bias.data
    K = kv @ p.k.weight.data + p.k.bias.data
    V = kv @ p.v.weight.data + p.v.bias.data
    d = p.head_dim
    heads = []
    for h in range(p.num_heads):
        sl = slice(h * d, (h + 1) * d)
        s = Q[..., sl] @ np.swapaxes(K[..., sl], -1, -2) / np.sqrt(d)
        a = np.exp(s - s.max(axis=-1, keepdims=True))
        a /= a.sum(axis=-1, keepdims=True)
        heads.append(a @ V[..., sl])
    return np.concatenate(heads, axis=-1) @ p.proj.weight.data + p.proj.bias.data


class TestMSA:
    def test_single_token_is_value_then_output_projection(self, rng):
        p = MultiHeadAttention(16, 2, rng)
        x = rng.normal(size=(3, 1, 16))
        expected = (x @ p.v.weight.data + p.v.bias.data) @ p.proj.weight.data + p.proj.bias.data
        np.testing.assert_allclose(msa_forward(Tensor(x), p).data, expected, atol=1e-12)

    def test_matches_direct_formula(self, rng):
        p = MultiHeadAttention(32, 1, rng)
        x = rng.normal(size=(1, 4, 32))
        np.testing.assert_allclose(msa_forward(Tensor(x), p).data, formula_msa(x, p), atol=1e-10, rtol=0)

    def test_multi_head_matches_direct_formula(self, rng):
        p = MultiHeadAttention(64, 4, rng)
        x = rng.normal(size=(2, 9, 64))
        np.testing.assert_allclose(msa_forward(Tensor(x), p).data, formula_msa(x, p), atol=1e-10, rtol=0)

    def test_parameter_count(self, rng):
        assert MultiHeadAttention(64, 2, rng).num_parameters() == 16_640

    def test_width_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            msa_forward(Tensor(np.zeros((1, 3, 8))), MultiHeadAttention(16, 1, rng))

    def test_rows_are_stochastic(self, rng):
        p = MultiHeadAttention(16, 4, rng)
        x = Tensor(rng.normal(size=(2, 6, 16)))
        weights = p.attention_weights(p.q(x), p.k(x)).data
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-10)

    def test_masked_keys_receive_no_weight(self, rng):
        p = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.normal(size=(1, 5, 8)))
        mask = np.array([[True, True, False, True, False]])
        weights = p.attention_weights(p.q(x), p.k(x), mask).data
        np.testing.assert_array_equal(weights[..., [2, 4]], 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-10)

    def test_permutation_equivariance(self, rng):
        p = MultiHeadAttention(16, 2, rng)
        x = rng.normal(size=(1, 7, 16))
        perm = rng.permutation(7)
        out = msa_forward(Tensor(x), p).data
        np.testing.assert_allclose(msa_forward(Tensor(x[:, perm]), p).data, out[:, perm], atol=1e-12)


class TestSumForm:
    def test_random_instance(self, rng):
        p = MultiHeadAttention(16, 2, rng)
        assert msa_sum_form_check(rng.normal(size=(2, 5, 16)), p) <= 1e-10

    def test_single_token_exact(self, rng):
        p = MultiHeadAttention(16, 2, rng)
        assert msa_sum_form_check(rng.normal(size=(3, 1, 16)), p) == 0.0

    def test_four_heads(self, rng):
        p = MultiHeadAttention(64, 4, rng)
        assert msa_sum_form_check(rng.normal(size=(1, 8, 64)), p) <= 1e-10


class TestDeformable:
    def test_zero_offsets_bypass_is_plain_msa(self, rng):
        p = DeformableAttention(16, 2, rng, modulation="bypass")
        x = rng.normal(size=(2, 16, 3, 4))
        expected = F.seq2img(msa_forward(F.img2seq(Tensor(x)), p.attn), 3, 4).data
        assert np.max(np.abs(md_msa_forward(Tensor(x), p).data - expected)) <= 1e-8

    def test_integer_shift_gathers_shifted_columns(self, rng):
        p = DeformableAttention(8, 1, rng, modulation="bypass")
        p.offset.bias.data[:] = [1.0, 0.0, 0.0]  # dx = 1 column, dy = 0
        x = rng.normal(size=(1, 8, 4, 5))
        x_hat, offsets, _ = p.resample(Tensor(x))
        np.testing.assert_array_equal(x_hat.data[..., :4], x[..., 1:])
        np.testing.assert_array_equal(x_hat.data[..., 4], x[..., 4])
        np.testing.assert_array_equal(offsets.data[..., 0], 1.0)

    def test_initial_modulation_is_half(self, rng):
        p = DeformableAttention(8, 1, rng)
        _, offsets, modulation = p.resample(Tensor(rng.normal(size=(2, 8, 3, 3))))
        np.testing.assert_array_equal(modulation.data, 0.5)
        np.testing.assert_array_equal(offsets.data, 0.0)

    def test_sigmoid_modulation_scales_samples(self, rng):
        p = DeformableAttention(8, 1, rng)
        x = rng.normal(size=(1, 8, 3, 3))
        x_hat, _, _ = p.resample(Tensor(x))
        np.testing.assert_allclose(x_hat.data, 0.5 * x, atol=0)

    def test_gradients_through_sampling(self, rng):
        p = DeformableAttention(8, 2, rng)
        p.offset.weight.data[:] = rng.normal(0.0, 0.3, size=p.offset.weight.shape)
        p.offset.bias.data[:] = [0.3, -0.2, 0.1]
        x = Tensor(rng.normal(size=(1, 8, 4, 4)), requires_grad=True)
        w = rng.normal(size=(1, 8, 4, 4))
        leaves = [x, p.offset.weight, p.offset.bias, p.attn.q.weight, p.attn.v.weight, p.attn.proj.weight]
        assert check_gradients(lambda: (md_msa_forward(x, p) * w).sum(), leaves) <= 1e-4

    def test_unknown_modulation(self, rng):
        with pytest.raises(ConfigurationError):
            DeformableAttention(8, 1, rng, modulation="tanh")


class TestWindowed:
    def test_large_window_is_global(self, rng):
        p = MultiHeadAttention(16, 2, rng)
        x = rng.normal(size=(1, 16, 5, 5))
        expected = F.seq2img(msa_forward(F.img2seq(Tensor(x)), p), 5, 5).data
        np.testing.assert_array_equal(windowed_attention(Tensor(x), p, 7).data, expected)

    def test_block_constant_input_gives_block_constant_output(self, rng):
        p = MultiHeadAttention(8, 1, rng)
        values = rng.normal(size=(2, 2, 8))
        x = np.zeros((1, 8, 14, 14))
        for i in range(2):
            for j in range(2):
                x[0, :, 7 * i:7 * i + 7, 7 * j:7 * j + 7] = values[i, j][:, None, None]
        out = windowed_attention(Tensor(x), p, 7).data
        for i in range(2):
            for j in range(2):
                tile = out[0, :, 7 * i:7 * i + 7, 7 * j:7 * j + 7]
                np.testing.assert_allclose(tile, tile[:, :1, :1] * np.ones((1, 7, 7)), atol=1e-12)

    def test_padding_carries_no_attention_mass(self, rng):
        p = MultiHeadAttention(8, 2, rng)
        x = rng.normal(size=(1, 8, 9, 9))
        out = windowed_attention(Tensor(x), p, 7).data
        # the bottom-right window holds a 2x2 valid corner; attention there must match
        # plain attention restricted to those four tokens
        corner = x[:, :, 7:9, 7:9]
        q = F.img2seq(Tensor(corner))
        expected = F.seq2img(msa_forward(q, p), 2, 2).data
        np.testing.assert_allclose(out[:, :, 7:9, 7:9], expected, atol=1e-12)

    def test_deformable_windowed_with_large_window_is_global(self, rng):
        p = DeformableAttention(16, 2, rng)
        x = Tensor(rng.normal(size=(1, 16, 4, 4)))
        np.testing.assert_array_equal(windowed_attention(x, p, 7, deformable=True).data,
                                      md_msa_forward(x, p).data)

    def test_flag_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            windowed_attention(Tensor(np.zeros((1, 8, 4, 4))), MultiHeadAttention(8, 1, rng), 2, deformable=True)


class TestCrossAttention:
    def test_single_feature_returns_its_value(self, rng):
        p = MultiHeadAttention(8, 2, rng)
        tokens, feat = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 1, 8))
        value = (feat @ p.v.weight.data + p.v.bias.data) @ p.proj.weight.data + p.proj.bias.data
        out = cross_attention(Tensor(tokens), Tensor(feat), p).data
        np.testing.assert_allclose(out, np.repeat(value, 3, axis=1), atol=1e-12)

    def test_identical_rows_make_weights_irrelevant(self, rng):
        p = MultiHeadAttention(8, 1, rng)
        feat = np.repeat(rng.normal(size=(1, 1, 8)), 5, axis=1)
        out_a = cross_attention(Tensor(rng.normal(size=(1, 2, 8))), Tensor(feat), p).data
        out_b = cross_attention(Tensor(rng.normal(size=(1, 2, 8))), Tensor(feat), p).data
        np.testing.assert_allclose(out_a, out_b, atol=1e-12)

    def test_matches_formula(self, rng):
        p = MultiHeadAttention(32, 1, rng)
        tokens, feat = rng.normal(size=(1, 2, 32)), rng.normal(size=(1, 6, 32))
        out = cross_attention(Tensor(tokens), Tensor(feat), p)
        assert out.shape == (1, 2, 32)
        np.testing.assert_allclose(out.data, formula_msa(tokens, p, feat), atol=1e-10)
