"""Reusable differentiable building blocks.

Asymmetric convolution block (summed 3x3 + 1x3 + 3x1 branches), channel
attention via squeeze-and-excitation, 3x3 channel reduction, and
power-of-two spatial resampling. All blocks preserve spatial size.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_finite(name: str, x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name}: input contains NaN or Inf values")


def _require_nchw(name: str, x: torch.Tensor, channels: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"{name}: expected a 4D (n, c, h, w) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(
            f"{name}: expected {channels} input channels, got {x.shape[1]} "
            f"(input shape {tuple(x.shape)})"
        )


class AsymmetricConvBlock(nn.Module):
    """Parallel 3x3, 1x3 and 3x1 convolutions whose outputs are summed.

    The three branches are bias-free and same-padded (3x3 pads 1,1; 1x3 pads
    0,1; 3x1 pads 1,0), so each preserves the spatial size. A single shared
    BatchNorm + ReLU is applied to the summed response; the branches carry no
    BatchNorm of their own. Trainable parameters:
    ``in_channels * out_channels * (9 + 3 + 3) + 2 * out_channels``.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv3x3 = nn.Conv2d(in_channels, out_channels, (3, 3), padding=(1, 1), bias=False)
        self.conv1x3 = nn.Conv2d(in_channels, out_channels, (1, 3), padding=(0, 1), bias=False)
        self.conv3x1 = nn.Conv2d(in_channels, out_channels, (3, 1), padding=(1, 0), bias=False)
        self.bn = nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def preactivation(self, x: torch.Tensor) -> torch.Tensor:
        """Summed branch response, before normalization and activation."""
        _require_nchw("AsymmetricConvBlock", x, self.in_channels)
        _require_finite("AsymmetricConvBlock", x)
        return self.conv3x3(x) + self.conv1x3(x) + self.conv3x1(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.preactivation(x)))


class SqueezeExcitation(nn.Module):
    """Channel attention: global-average-pool, bottleneck MLP, sigmoid scales.

    Each channel of the input is multiplied by a scale in (0, 1) computed
    from the pooled channel descriptor. The bottleneck width is
    ``channels // ratio``; ``channels`` must be divisible by ``ratio``.
    """

    def __init__(self, channels: int, ratio: int = 16):
        super().__init__()
        if ratio < 1 or channels % ratio != 0:
            raise ValueError(
                f"SqueezeExcitation: channels ({channels}) must be divisible by ratio ({ratio})"
            )
        self.channels = channels
        self.ratio = ratio
        self.squeeze = nn.Linear(channels, channels // ratio)
        self.excite = nn.Linear(channels // ratio, channels)

    def scales(self, x: torch.Tensor) -> torch.Tensor:
        """Per-(sample, channel) multipliers, shape (n, c), each in (0, 1)."""
        _require_nchw("SqueezeExcitation", x, self.channels)
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.scales(x)
        return x * s[:, :, None, None]


class ChannelReduce(nn.Module):
    """3x3 same-padded projection to a fixed channel count, with BN + ReLU.

    Used to bring every encoder output to the common decoder width (64 in
    the default configuration) before cross-scale fusion.
    """

    def __init__(self, in_channels: int, out_channels: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _require_nchw("ChannelReduce", x, self.in_channels)
        return F.relu(self.bn(self.conv(x)))


def resample(x: torch.Tensor, factor: int, direction: str) -> torch.Tensor:
    """Resample a (n, c, h, w) tensor by a power-of-two factor.

    ``direction="up"`` uses bilinear interpolation with align_corners=False
    (source coordinate for output pixel i is ``(i + 0.5) / factor - 0.5``);
    ``direction="down"`` uses max pooling with window == stride == factor and
    requires h and w to be divisible by the factor. Channel count is
    unchanged; ``factor=1`` returns the input untouched.
    """
    if x.dim() != 4:
        raise ValueError(f"resample: expected a 4D tensor, got shape {tuple(x.shape)}")
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError(f"resample: factor must be a power of two, got {factor}")
    if factor == 1:
        return x
    if direction == "up":
        return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    if direction == "down":
        h, w = x.shape[2], x.shape[3]
        if h % factor != 0 or w % factor != 0:
            raise ValueError(
                f"resample: spatial size {h}x{w} not divisible by downsampling factor {factor}"
            )
        return F.max_pool2d(x, kernel_size=factor, stride=factor)
    raise ValueError(f"resample: direction must be 'up' or 'down', got {direction!r}")


def block_param_count(kind: str, c_in: int, c_out: int = 64, ratio: int = 16) -> int:
    """Closed-form trainable-parameter count for one block configuration.

    kind="asym":   c_in*c_out*(9+3+3) + 2*c_out   (bias-free branches, one BN)
    kind="se":     c*(c/r) + c/r + (c/r)*c + c    (two biased linear maps; c = c_in)
    kind="reduce": c_in*c_out*9 + 2*c_out         (bias-free 3x3 conv, one BN)
    """
    if kind == "asym":
        return c_in * c_out * 15 + 2 * c_out
    if kind == "se":
        if ratio < 1 or c_in % ratio != 0:
            raise ValueError(f"block_param_count: channels ({c_in}) not divisible by ratio ({ratio})")
        mid = c_in // ratio
        return c_in * mid + mid + mid * c_in + c_in
    if kind == "reduce":
        return c_in * c_out * 9 + 2 * c_out
    raise ValueError(f"block_param_count: unknown kind {kind!r}")
