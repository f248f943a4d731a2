import math

import numpy as np
import pytest
import torch
from scipy import signal

from effiseg.blocks import (
    AsymmetricConvBlock,
    ChannelReduce,
    SqueezeExcitation,
    block_param_count,
    resample,
)

from fdcheck import check_gradients, max_rel_error, sample_parameter_entries


def correlate_same_loops(x2d, k2d):
    """Brute-force zero-padded 'same' correlation, pure python/numpy."""
    kh, kw = k2d.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x2d, ((ph, ph), (pw, pw)))
    out = np.zeros_like(x2d, dtype=np.float64)
    for i in range(x2d.shape[0]):
        for j in range(x2d.shape[1]):
            out[i, j] = float((xp[i:i + kh, j:j + kw] * k2d).sum())
    return out


def conv_same_oracle(x, weight, correlate=correlate_same_loops):
    """Independent (n, c_in, h, w) x (c_out, c_in, kh, kw) -> (n, c_out, h, w)."""
    n, c_in, h, w = x.shape
    c_out = weight.shape[0]
    out = np.zeros((n, c_out, h, w), dtype=np.float64)
    for b in range(n):
        for co in range(c_out):
            for ci in range(c_in):
                out[b, co] += correlate(x[b, ci], weight[co, ci])
    return out


def correlate_same_scipy(x2d, k2d):
    return signal.correlate2d(x2d, k2d, mode="same", boundary="fill")


def tensor_rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


class TestAsymmetricConvBlock:
    def test_zero_input_gives_zero_output(self):
        block = AsymmetricConvBlock(2, 3).eval()
        out = block(torch.zeros(1, 2, 5, 7))
        assert torch.equal(out, torch.zeros(1, 3, 5, 7))

    def test_all_ones_hand_oracle(self):
        block = AsymmetricConvBlock(1, 1).eval()
        with torch.no_grad():
            for conv in (block.conv3x3, block.conv1x3, block.conv3x1):
                conv.weight.fill_(1.0)
        x = torch.ones(1, 1, 3, 3)
        with torch.no_grad():
            pre = block.preactivation(x)
        expected = np.array([[8.0, 11.0, 8.0], [11.0, 15.0, 11.0], [8.0, 11.0, 8.0]])
        assert pre[0, 0, 1, 1].item() == pytest.approx(15.0)
        np.testing.assert_allclose(pre[0, 0].numpy(), expected, rtol=1e-6)
        # same map from the generic loop oracle
        ones = np.ones((3, 3))
        oracle = sum(
            conv_same_oracle(x.numpy(), np.ones((1, 1) + k))
            for k in ((3, 3), (1, 3), (3, 1))
        )
        np.testing.assert_allclose(pre.numpy(), oracle, rtol=1e-6)
        # identity BN + ReLU: forward stays within BN-epsilon of the oracle
        with torch.no_grad():
            fwd = block(x)
        assert tensor_rel_error(fwd.numpy(), oracle) < 1e-5

    def test_matches_three_independent_convolutions(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            c_in = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 5))
            h = int(rng.integers(3, 9))
            w = int(rng.integers(3, 9))
            block = AsymmetricConvBlock(c_in, c_out)
            x = torch.from_numpy(rng.standard_normal((2, c_in, h, w))).float()
            with torch.no_grad():
                pre = block.preactivation(x)
            xn = x.numpy().astype(np.float64)
            oracle = (
                conv_same_oracle(xn, block.conv3x3.weight.detach().numpy(), correlate_same_scipy)
                + conv_same_oracle(xn, block.conv1x3.weight.detach().numpy(), correlate_same_scipy)
                + conv_same_oracle(xn, block.conv3x1.weight.detach().numpy(), correlate_same_scipy)
            )
            assert tensor_rel_error(pre.numpy(), oracle) < 1e-5, f"trial {trial}"

    def test_rejects_channel_mismatch(self):
        block = AsymmetricConvBlock(3, 4)
        with pytest.raises(ValueError, match="channels"):
            block(torch.zeros(1, 2, 5, 5))

    def test_rejects_non_4d(self):
        with pytest.raises(ValueError, match="4D"):
            AsymmetricConvBlock(3, 4)(torch.zeros(3, 5, 5))

    def test_rejects_non_finite_input(self):
        block = AsymmetricConvBlock(1, 1)
        x = torch.ones(1, 1, 4, 4)
        x[0, 0, 2, 2] = float("nan")
        with pytest.raises(ValueError, match="NaN or Inf"):
            block(x)

    def test_training_mode_updates_running_stats(self):
        block = AsymmetricConvBlock(2, 3)
        before = block.bn.running_mean.clone()
        block.train()
        block(torch.randn(4, 2, 6, 6, generator=torch.Generator().manual_seed(0)))
        assert not torch.equal(block.bn.running_mean, before)
        block.eval()
        frozen = block.bn.running_mean.clone()
        block(torch.randn(4, 2, 6, 6))
        assert torch.equal(block.bn.running_mean, frozen)


class TestSqueezeExcitation:
    def test_zero_weights_scale_half(self):
        se = SqueezeExcitation(4, ratio=2)
        with torch.no_grad():
            se.squeeze.weight.zero_()
            se.squeeze.bias.zero_()
            se.excite.weight.zero_()
            se.excite.bias.zero_()
        x = torch.randn(2, 4, 3, 3, generator=torch.Generator().manual_seed(1))
        assert torch.equal(se(x), 0.5 * x)

    def test_scalar_arithmetic_oracle(self):
        se = SqueezeExcitation(2, ratio=2)
        with torch.no_grad():
            se.squeeze.weight.copy_(torch.tensor([[0.3, -0.2]]))
            se.squeeze.bias.copy_(torch.tensor([0.1]))
            se.excite.weight.copy_(torch.tensor([[0.5], [-0.7]]))
            se.excite.bias.copy_(torch.tensor([0.05, -0.1]))
        x = torch.tensor([[[[2.0]], [[-4.0]]]])
        # scalar evaluation of the squeeze-excite formula
        z = max(0.0, 0.3 * 2.0 + (-0.2) * (-4.0) + 0.1)
        s1 = 1.0 / (1.0 + math.exp(-(0.5 * z + 0.05)))
        s2 = 1.0 / (1.0 + math.exp(-(-0.7 * z - 0.1)))
        out = se(x)
        assert out[0, 0, 0, 0].item() == pytest.approx(2.0 * s1, rel=1e-6)
        assert out[0, 1, 0, 0].item() == pytest.approx(-4.0 * s2, rel=1e-6)

    def test_scales_strictly_inside_unit_interval(self):
        rng = torch.Generator().manual_seed(7)
        for _ in range(20):
            se = SqueezeExcitation(8, ratio=4)
            s = se.scales(torch.randn(3, 8, 5, 5, generator=rng) * 10)
            assert (s > 0).all() and (s < 1).all()

    def test_identity_action_per_channel(self):
        se = SqueezeExcitation(4, ratio=2)
        x = torch.randn(2, 4, 6, 6, generator=torch.Generator().manual_seed(3))
        x[x.abs() < 1e-3] = 0.5  # keep the ratio well defined
        out = se(x)
        s = se.scales(x)
        ratio = out / x
        for n in range(2):
            for c in range(4):
                channel = ratio[n, c]
                assert torch.allclose(channel, s[n, c].expand_as(channel), rtol=1e-6)

    def test_requires_divisible_channels(self):
        with pytest.raises(ValueError, match="divisible"):
            SqueezeExcitation(10, ratio=3)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            SqueezeExcitation(4, 2)(torch.zeros(1, 3, 2, 2))


class TestChannelReduce:
    @pytest.mark.parametrize("c_in,hw", [(40, 28), (320, 7)])
    def test_output_always_64_channels(self, c_in, hw):
        block = ChannelReduce(c_in, 64).eval()
        out = block(torch.randn(1, c_in, hw, hw))
        assert out.shape == (1, 64, hw, hw)

    def test_zero_input_gives_zero_output(self):
        block = ChannelReduce(5, 64).eval()
        assert torch.equal(block(torch.zeros(2, 5, 4, 4)), torch.zeros(2, 64, 4, 4))

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            ChannelReduce(5, 64)(torch.zeros(1, 4, 4, 4))


class TestResample:
    def test_constant_upsample_stays_constant(self):
        x = torch.full((1, 2, 3, 3), 2.5)
        up = resample(x, 2, "up")
        assert up.shape == (1, 2, 6, 6)
        assert torch.allclose(up, torch.full_like(up, 2.5))

    def test_maxpool_keeps_single_peak(self):
        x = torch.zeros(1, 1, 4, 4)
        x[0, 0, 1, 2] = 9.0
        down = resample(x, 2, "down")
        expected = torch.zeros(1, 1, 2, 2)
        expected[0, 0, 0, 1] = 9.0
        assert torch.equal(down, expected)

    def test_bilinear_matches_interpolation_formula(self):
        ramp = np.array([[0.0, 1.0], [2.0, 3.0]])
        f = 2
        h, w = ramp.shape
        oracle = np.zeros((h * f, w * f))
        for i in range(h * f):
            for j in range(w * f):
                sy = min(max((i + 0.5) / f - 0.5, 0.0), h - 1.0)
                sx = min(max((j + 0.5) / f - 0.5, 0.0), w - 1.0)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                wy, wx = sy - y0, sx - x0
                oracle[i, j] = (
                    ramp[y0, x0] * (1 - wy) * (1 - wx)
                    + ramp[y0, x1] * (1 - wy) * wx
                    + ramp[y1, x0] * wy * (1 - wx)
                    + ramp[y1, x1] * wy * wx
                )
        up = resample(torch.from_numpy(ramp)[None, None].float(), f, "up")
        np.testing.assert_allclose(up[0, 0].numpy(), oracle, rtol=1e-5)

    def test_channels_unchanged(self):
        x = torch.randn(2, 5, 8, 8)
        assert resample(x, 4, "up").shape == (2, 5, 32, 32)
        assert resample(x, 4, "down").shape == (2, 5, 2, 2)

    def test_factor_one_is_identity(self):
        x = torch.randn(1, 1, 3, 3)
        assert resample(x, 1, "down") is x

    def test_rejects_indivisible_down(self):
        with pytest.raises(ValueError, match="divisible"):
            resample(torch.zeros(1, 1, 5, 4), 2, "down")

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            resample(torch.zeros(1, 1, 6, 6), 3, "up")

    def test_rejects_unknown_direction(self):
        with pytest.raises(ValueError, match="direction"):
            resample(torch.zeros(1, 1, 4, 4), 2, "sideways")


class TestBlockParamCount:
    def test_frozen_arithmetic_cases(self):
        assert block_param_count("asym", 192, 64) == 184_448
        assert block_param_count("se", 64, ratio=16) == 580
        assert block_param_count("reduce", 1, 64) == 704

    @pytest.mark.parametrize("kind,c_in,c_out,ratio,build", [
        ("asym", 192, 64, 16, lambda: AsymmetricConvBlock(192, 64)),
        ("asym", 24, 8, 4, lambda: AsymmetricConvBlock(24, 8)),
        ("se", 64, 64, 16, lambda: SqueezeExcitation(64, 16)),
        ("se", 8, 8, 4, lambda: SqueezeExcitation(8, 4)),
        ("reduce", 1, 64, 16, lambda: ChannelReduce(1, 64)),
        ("reduce", 320, 64, 16, lambda: ChannelReduce(320, 64)),
    ])
    def test_matches_introspection(self, kind, c_in, c_out, ratio, build):
        module = build()
        introspected = sum(p.numel() for p in module.parameters())
        assert block_param_count(kind, c_in, c_out, ratio) == introspected

    def test_rejects_bad_se_ratio(self):
        with pytest.raises(ValueError, match="divisible"):
            block_param_count("se", 10, ratio=3)

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            block_param_count("dense", 8, 8)


def test_blocks_preserve_spatial_size_randomized():
    rng = np.random.default_rng(9)
    for _ in range(25):
        h = int(rng.integers(2, 17))
        w = int(rng.integers(2, 17))
        c = int(rng.integers(1, 7)) * 4
        x = torch.randn(1, c, h, w)
        assert AsymmetricConvBlock(c, 8).eval()(x).shape[2:] == (h, w)
        assert SqueezeExcitation(c, 4)(x).shape[2:] == (h, w)
        assert ChannelReduce(c, 16).eval()(x).shape[2:] == (h, w)


@pytest.mark.parametrize("name,build,c_in", [
    ("asym", lambda: AsymmetricConvBlock(3, 4), 3),
    ("se", lambda: SqueezeExcitation(4, 2), 4),
    ("reduce", lambda: ChannelReduce(3, 4), 3),
])
def test_block_gradients_match_finite_differences(name, build, c_in):
    torch.manual_seed(101)
    block = build().double().eval()
    x = torch.randn(2, c_in, 5, 5, dtype=torch.float64)
    weight = torch.randn(2, 4, 5, 5, dtype=torch.float64)

    def loss_fn():
        return (block(x) * weight).sum()

    rng = np.random.default_rng(7)
    entries = sample_parameter_entries(list(block.named_parameters()), per_param=12, rng=rng)
    assert len(entries) >= 20
    results = check_gradients(loss_fn, entries, step=1e-5)
    assert max_rel_error(results) < 1e-4
