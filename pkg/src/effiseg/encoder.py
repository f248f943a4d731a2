"""EfficientNetB0 backbone adapter exposing stride-8/16/32 stage outputs.

The first two encoder stages (strides 2 and 4) are computed internally but
never exposed: the decoder consumes only the three retained scales. Two
truncations of the stride-32 tail are supported; the default "stage7-slim"
keeps a single block of the 192-channel stage to stay inside the targeted
parameter budget (see ``encoder_param_count``).
"""

import contextlib
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
from torchvision.models import efficientnet_b0

from .exceptions import ConfigError


class EncoderFeatures(NamedTuple):
    """The three retained encoder outputs for an input of size (h, w)."""

    f3: torch.Tensor  # stride 8,  40 channels
    f4: torch.Tensor  # stride 16, 112 channels
    f5: torch.Tensor  # stride 32, 320 channels


# stage7-slim: stages 1-5 complete, first (downsampling) block of the
# 192-channel stage, then the 320-channel block. stage7-full keeps every
# block up to and including the 320-channel one; the 1280-wide head
# convolution and the classifier are excluded in both cases.
TRUNCATIONS = ("stage7-slim", "stage7-full")

INIT_MODES = ("random", "pretrained")


@dataclass(frozen=True)
class EncoderConfig:
    init: str = "random"
    seed: int = 0
    truncation: str = "stage7-slim"
    trainable: bool = True
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.init not in INIT_MODES:
            raise ConfigError(f"encoder init must be one of {INIT_MODES}, got {self.init!r}")
        if self.truncation not in TRUNCATIONS:
            raise ConfigError(
                f"encoder truncation must be one of {TRUNCATIONS}, got {self.truncation!r}"
            )


# EfficientNetB0 stage table: (expand_ratio, out_channels, repeats, stride, kernel)
_B0_STEM_CHANNELS = 32
_B0_STAGES = (
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
)

FEATURE_CHANNELS = (40, 112, 320)  # widths at strides 8 / 16 / 32


def _mbconv_param_count(c_in: int, c_out: int, expand: int, kernel: int) -> int:
    """Trainable parameters of one inverted-residual block.

    Layout: optional 1x1 expansion (bias-free conv + BN), depthwise kxk
    (bias-free + BN), squeeze-excitation with two biased 1x1 convs whose
    bottleneck width is c_in // 4, and a 1x1 projection (bias-free + BN).
    """
    hidden = c_in * expand
    count = 0
    if expand != 1:
        count += c_in * hidden + 2 * hidden
    count += hidden * kernel * kernel + 2 * hidden
    se_ch = max(1, c_in // 4)
    count += hidden * se_ch + se_ch + se_ch * hidden + hidden
    count += hidden * c_out + 2 * c_out
    return count


def _stage_repeats(truncation: str, stage_index: int, repeats: int) -> int:
    if truncation == "stage7-slim" and stage_index == 6:
        return 1
    return repeats


def encoder_param_count(truncation: str = "stage7-slim") -> int:
    """Closed-form trainable-parameter count of the truncated backbone."""
    if truncation not in TRUNCATIONS:
        raise ConfigError(f"unknown truncation {truncation!r}")
    total = 3 * _B0_STEM_CHANNELS * 9 + 2 * _B0_STEM_CHANNELS
    c_in = _B0_STEM_CHANNELS
    for stage_index, (expand, c_out, repeats, _stride, kernel) in enumerate(_B0_STAGES, start=1):
        for r in range(_stage_repeats(truncation, stage_index, repeats)):
            total += _mbconv_param_count(c_in if r == 0 else c_out, c_out, expand, kernel)
        c_in = c_out
    return total


@contextlib.contextmanager
def _seeded_rng(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _load_backbone_weights(backbone: nn.Module, config: EncoderConfig) -> None:
    """Load ImageNet-trained weights into the full backbone, or fail loudly."""
    if config.weights_path is not None:
        try:
            state = torch.load(config.weights_path, map_location="cpu")
        except Exception as exc:
            raise RuntimeError(
                f"failed to load encoder weights from {config.weights_path!r}: {exc}"
            ) from exc
        missing, unexpected = backbone.load_state_dict(state, strict=False)
        # classifier keys may be absent from feature-only weight files
        bad_missing = [k for k in missing if not k.startswith("classifier")]
        if bad_missing or unexpected:
            raise RuntimeError(
                f"encoder weight file {config.weights_path!r} does not match the "
                f"EfficientNetB0 layout (missing={bad_missing[:4]}, unexpected={list(unexpected)[:4]})"
            )
        return
    try:
        from torchvision.models import EfficientNet_B0_Weights

        reference = efficientnet_b0(weights=EfficientNet_B0_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise RuntimeError(
            "pretrained encoder weights requested but no weights_path was given and "
            f"the torchvision download failed ({exc}); provide a local weight file"
        ) from exc
    backbone.load_state_dict(reference.state_dict())


class EfficientNetB0Encoder(nn.Module):
    """Truncated EfficientNetB0 returning the stride-8/16/32 feature maps."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.feature_channels = FEATURE_CHANNELS
        with _seeded_rng(config.seed):
            backbone = efficientnet_b0(weights=None)
        if config.init == "pretrained":
            _load_backbone_weights(backbone, config)
        feats = backbone.features
        stage6 = feats[6] if config.truncation == "stage7-full" else nn.Sequential(feats[6][0])
        self.to_f3 = nn.Sequential(feats[0], feats[1], feats[2], feats[3])
        self.to_f4 = nn.Sequential(feats[4], feats[5])
        self.to_f5 = nn.Sequential(stage6, feats[7])
        if not config.trainable:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> EncoderFeatures:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(
                f"encoder expects a (n, 3, h, w) input, got shape {tuple(x.shape)}"
            )
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"encoder input size {h}x{w} must be divisible by 32")
        f3 = self.to_f3(x)
        f4 = self.to_f4(f3)
        f5 = self.to_f5(f4)
        return EncoderFeatures(f3=f3, f4=f4, f5=f5)


def load_encoder(config: EncoderConfig) -> EfficientNetB0Encoder:
    """Build an encoder per config; pretrained load failures are explicit."""
    return EfficientNetB0Encoder(config)
