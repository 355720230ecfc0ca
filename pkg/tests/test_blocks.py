"""EAT block parts: WOM mixing, MSRA, GLI, FFN and their composition."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eatformer import functional as F
from eatformer.blocks import (
    FFN,
    GLI,
    MSRA,
    EATBlock,
    conv_groups,
    eat_block_forward,
    ffn_forward,
    gli_forward,
    msra_forward,
    split_channels,
    wom_mix,
)
from eatformer.errors import ConfigurationError, DimensionError
from eatformer.gradcheck import check_gradients
from eatformer.tensor import Tensor


class TestWOM:
    def test_single_output_unchanged(self, rng):
        o = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(wom_mix([Tensor(o)], Tensor([0.7])).data, o)

    def test_equal_alphas_give_mean(self, rng):
        outs = [rng.normal(size=(2, 5)) for _ in range(3)]
        mixed = wom_mix([Tensor(o) for o in outs], Tensor(np.full(3, 2.0))).data
        np.testing.assert_allclose(mixed, sum(outs) / 3, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.floats(-50, 50))
    def test_shift_invariance(self, alphas, c):
        rng = np.random.default_rng(len(alphas))
        outs = [Tensor(rng.normal(size=(3, 4))) for _ in alphas]
        a = wom_mix(outs, Tensor(alphas)).data
        b = wom_mix(outs, Tensor(np.asarray(alphas) + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            wom_mix([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))], Tensor(np.zeros(2)))
        with pytest.raises(DimensionError):
            wom_mix([Tensor(np.zeros(2))], Tensor(np.zeros(2)))


class TestMSRA:
    def test_zero_projection_is_pure_residual(self, rng):
        m = MSRA(8, 8, rng, dilations=(1,))
        m.proj.weight.data[:] = 0.0
        m.proj.bias.data[:] = 0.0
        x = rng.normal(size=(2, 8, 5, 5))
        np.testing.assert_array_equal(msra_forward(Tensor(x), m).data, x)

    def test_three_dilations_share_output_shape(self, rng):
        m = MSRA(16, 16, rng, dilations=(1, 2, 3), group_width=8)
        x = Tensor(rng.normal(size=(1, 16, 7, 7)))
        shapes = {p(x).shape for p in m.paths}
        assert shapes == {(1, 16, 7, 7)} and len(m.paths) == 3
        assert msra_forward(x, m).shape == (1, 16, 7, 7)
        np.testing.assert_allclose(m.mixing_weights().sum(), 1.0, atol=1e-12)

    def test_stride_two_halves_extent(self, rng):
        m = MSRA(8, 16, rng, dilations=(1, 2), stride=2)
        assert msra_forward(Tensor(rng.normal(size=(1, 8, 14, 14))), m).shape == (1, 16, 7, 7)
        assert m.shortcut is not None and m.shortcut.stride == 2 and m.shortcut.kernel_size == 1

    def test_identity_shortcut_when_shape_kept(self, rng):
        assert MSRA(8, 8, rng).shortcut is None

    def test_matches_manual_composition(self, rng):
        m = MSRA(4, 4, rng, dilations=(1, 2)).eval()
        m.alphas.data[:] = [0.3, -0.4]
        x = Tensor(rng.normal(size=(2, 4, 6, 6)))
        w = np.exp([0.3, -0.4]) / np.exp([0.3, -0.4]).sum()
        mixed = w[0] * m.paths[0](x).data + w[1] * m.paths[1](x).data
        expected = x.data + m.proj(Tensor(mixed)).data
        np.testing.assert_allclose(msra_forward(x, m).data, expected, atol=1e-12)

    def test_bad_stride(self, rng):
        with pytest.raises(ConfigurationError):
            MSRA(4, 4, rng, stride=3)

    @pytest.mark.parametrize("cin,cout,width,groups", [(64, 64, 16, 4), (160, 256, 32, 4), (3, 16, None, 1), (48, 64, 32, 1)])
    def test_group_choice(self, cin, cout, width, groups):
        assert conv_groups(cin, cout, width) == groups


class TestGLI:
    def test_split_rounding(self):
        assert split_channels(64, 0.5, 32) == (32, 32)
        assert split_channels(160, 0.5, 32) == (64, 96)
        assert split_channels(64, 1.0, 32) == (64, 0)
        assert split_channels(64, 0.0, 32) == (0, 64)
        assert split_channels(10, 0.25, 1) == (3, 7)

    @pytest.mark.parametrize("p", [-0.1, 1.5])
    def test_ratio_outside_unit_interval(self, rng, p):
        with pytest.raises(ConfigurationError):
            GLI(64, rng, split_ratio=p)

    def test_pure_global(self, rng):
        g = GLI(16, rng, split_ratio=1.0, head_dim=8, window=7).eval()
        assert g.local is None
        x = Tensor(rng.normal(size=(1, 16, 5, 5)))
        expected = 0.5 * g.global_path(x).data + x.data
        np.testing.assert_allclose(gli_forward(x, g).data, expected, atol=1e-12)

    def test_pure_local(self, rng):
        g = GLI(16, rng, split_ratio=0.0, head_dim=8).eval()
        assert g.attn is None
        x = Tensor(rng.normal(size=(1, 16, 5, 5)))
        np.testing.assert_allclose(gli_forward(x, g).data, 0.5 * g.local(x).data + x.data, atol=1e-12)

    def test_channel_flow(self, rng):
        g = GLI(64, rng, split_ratio=0.5, head_dim=32, window=7).eval()
        assert (g.global_channels, g.local_channels) == (32, 32)
        x = rng.normal(size=(1, 64, 4, 4))
        base = gli_forward(Tensor(x), g).data
        bumped = x.copy()
        bumped[:, 32:] += rng.normal(size=(1, 32, 4, 4))
        out = gli_forward(Tensor(bumped), g).data
        np.testing.assert_array_equal(out[:, :32], base[:, :32])
        bumped = x.copy()
        bumped[:, :32] += rng.normal(size=(1, 32, 4, 4))
        out = gli_forward(Tensor(bumped), g).data
        np.testing.assert_array_equal(out[:, 32:], base[:, 32:])

    def test_shape_preserved(self, rng):
        g = GLI(64, rng, window=3)
        assert gli_forward(Tensor(rng.normal(size=(2, 64, 5, 5))), g).shape == (2, 64, 5, 5)


class TestFFN:
    def test_zero_second_layer(self, rng):
        f = FFN(8, rng)
        f.fc2.weight.data[:] = 0.0
        f.fc2.bias.data[:] = 0.0
        np.testing.assert_array_equal(ffn_forward(Tensor(rng.normal(size=(2, 3, 8))), f).data, 0.0)

    def test_positions_independent(self, rng):
        f = FFN(8, rng)
        row = rng.normal(size=8)
        x = np.stack([row, rng.normal(size=8), row])[None]
        out = ffn_forward(Tensor(x), f).data
        np.testing.assert_array_equal(out[0, 0], out[0, 2])

    def test_relu_matches_two_matmul_oracle(self, rng):
        f = FFN(8, rng, ratio=4, act="relu")
        x = rng.normal(size=(2, 5, 8))
        hidden = np.maximum(0.0, x @ f.fc1.weight.data + f.fc1.bias.data)
        expected = hidden @ f.fc2.weight.data + f.fc2.bias.data
        np.testing.assert_allclose(ffn_forward(Tensor(x), f).data, expected, atol=1e-12, rtol=0)

    def test_hidden_width(self, rng):
        assert FFN(12, rng, ratio=3).fc1.out_features == 36


class TestEATBlock:
    def test_all_disabled_is_identity(self, rng):
        b = EATBlock(8, rng, use_msra=False, use_gli=False, use_ffn=False)
        x = rng.normal(size=(1, 8, 3, 3))
        np.testing.assert_array_equal(eat_block_forward(Tensor(x), b).data, x)
        assert b.num_parameters() == 0

    def test_ffn_only_is_prenorm_residual(self, rng):
        b = EATBlock(8, rng, use_msra=False, use_gli=False).eval()
        x = Tensor(rng.normal(size=(2, 8, 3, 3)))
        seq = F.img2seq(x)
        expected = F.seq2img(seq + b.ffn(b.ffn_norm(seq)), 3, 3).data
        np.testing.assert_array_equal(eat_block_forward(x, b).data, expected)

    def test_full_block_gradient(self, rng):
        b = EATBlock(32, rng, dilations=(1, 2), head_dim=16, window=3, group_width=8).eval()
        b.gli.attn.offset.weight.data[:] = rng.normal(0.0, 0.1, size=b.gli.attn.offset.weight.shape)
        x = Tensor(rng.normal(size=(1, 32, 5, 5)), requires_grad=True)
        w = rng.normal(size=(1, 32, 5, 5))
        out = eat_block_forward(x, b)
        assert np.all(np.isfinite(out.data))
        leaves = [x, b.msra.alphas, b.msra.paths[1].conv.weight, b.gli.alphas, b.gli.attn.offset.weight,
                  b.gli.local.dw.weight, b.ffn.fc1.weight]
        assert check_gradients(lambda: (eat_block_forward(x, b) * w).sum(), leaves, max_entries=20) <= 1e-4

    def test_alpha_shift_leaves_output_unchanged(self, rng):
        b = EATBlock(64, rng, dilations=(1, 2, 3), window=3).eval()
        x = Tensor(rng.normal(size=(1, 64, 4, 4)))
        before = eat_block_forward(x, b).data
        b.msra.alphas.data += 3.7
        b.gli.alphas.data -= 11.0
        np.testing.assert_allclose(eat_block_forward(x, b).data, before, atol=1e-12, rtol=0)

    def test_zero_branches_keep_identity_path(self, rng):
        b = EATBlock(64, rng, dilations=(1, 2), window=3).eval()
        for layer in (b.msra.proj, b.gli.local.pw, b.gli.attn.attn.proj, b.ffn.fc2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        x = rng.normal(size=(1, 64, 4, 4))
        np.testing.assert_array_equal(eat_block_forward(Tensor(x), b).data, x)

    @pytest.mark.parametrize("hw", [1, 4, 9])
    def test_shape_preservation(self, rng, hw):
        b = EATBlock(64, rng, dilations=(1, 2, 3))
        assert eat_block_forward(Tensor(rng.normal(size=(2, 64, hw, hw))), b).shape == (2, 64, hw, hw)
