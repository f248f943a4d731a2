"""Network assembly and parameter auditing.

The decoder is a full-scale-connected partial decoder over the three
retained encoder scales (strides 8/16/32). Two aggregation nodes are used:

    D4 (stride 16) = SE(Asym(cat[reduce(max2(f3)), reduce(f4), reduce(up2(f5))]))
    D3 (stride 8)  = SE(Asym(cat[reduce(f3), reduce(up2(D4)), reduce(up4(f5))]))

followed by a 1x1 convolution to one channel, x8 bilinear upsampling to the
input size, and a sigmoid. Every decoder node therefore fuses contributions
from all three retained scales, and nothing below stride 8 ever reaches the
decoder.
"""

import dataclasses
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from . import blocks
from .blocks import AsymmetricConvBlock, ChannelReduce, SqueezeExcitation, resample
from .encoder import EncoderConfig, encoder_param_count, load_encoder, _seeded_rng
from .exceptions import CheckpointError, ConfigError

CHECKPOINT_FORMAT = "effiseg-ckpt-1"

# Published parameter budget this architecture targets, for audit reporting.
REFERENCE_TOTAL_PARAMS = 2_626_337


@dataclass(frozen=True)
class ModelConfig:
    reduce_channels: int = 64
    se_ratio: int = 16
    decoder_out_channels: int = 64
    input_size: Tuple[int, int] = (224, 224)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0

    def __post_init__(self):
        if self.reduce_channels < 1 or self.reduce_channels % self.se_ratio != 0:
            raise ConfigError(
                f"reduce_channels ({self.reduce_channels}) must be a positive multiple "
                f"of se_ratio ({self.se_ratio})"
            )
        if self.decoder_out_channels < 1 or self.decoder_out_channels % self.se_ratio != 0:
            raise ConfigError(
                f"decoder_out_channels ({self.decoder_out_channels}) must be a positive "
                f"multiple of se_ratio ({self.se_ratio})"
            )
        h, w = self.input_size
        if h % 32 != 0 or w % 32 != 0:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")


def _check_finite(layer: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise RuntimeError(f"non-finite activations after {layer}")
    return t


class EffiSegNet(nn.Module):
    """Binary segmentation network: truncated backbone + full-scale partial decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = load_encoder(config.encoder)
        c3, c4, c5 = self.encoder.feature_channels
        rc = config.reduce_channels
        oc = config.decoder_out_channels
        # decoder construction under its own seed: default conv/linear init
        # is fan-in-scaled uniform, which is what we want
        with _seeded_rng(config.seed):
            self.reduce_f3_d4 = ChannelReduce(c3, rc)
            self.reduce_f4_d4 = ChannelReduce(c4, rc)
            self.reduce_f5_d4 = ChannelReduce(c5, rc)
            self.asym_d4 = AsymmetricConvBlock(3 * rc, oc)
            self.se_d4 = SqueezeExcitation(oc, config.se_ratio)
            self.reduce_f3_d3 = ChannelReduce(c3, rc)
            self.reduce_d4_d3 = ChannelReduce(oc, rc)
            self.reduce_f5_d3 = ChannelReduce(c5, rc)
            self.asym_d3 = AsymmetricConvBlock(3 * rc, oc)
            self.se_d3 = SqueezeExcitation(oc, config.se_ratio)
            self.head = nn.Conv2d(oc, 1, kernel_size=1)

    def decoder_input_edges(self) -> List[Tuple[str, str, int]]:
        """All (node, source, source_stride) edges feeding the decoder.

        Enumerated from the wiring above; used to assert structurally that
        no stride-2 or stride-4 encoder output can reach the decoder.
        """
        return [
            ("D4", "f3", 8),
            ("D4", "f4", 16),
            ("D4", "f5", 32),
            ("D3", "f3", 8),
            ("D3", "D4", 16),
            ("D3", "f5", 32),
            ("head", "D3", 8),
        ]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f3, f4, f5 = self.encoder(x)
        _check_finite("encoder.f3", f3)
        _check_finite("encoder.f4", f4)
        _check_finite("encoder.f5", f5)
        d4 = self.se_d4(self.asym_d4(torch.cat([
            self.reduce_f3_d4(resample(f3, 2, "down")),
            self.reduce_f4_d4(f4),
            self.reduce_f5_d4(resample(f5, 2, "up")),
        ], dim=1)))
        _check_finite("decoder.D4", d4)
        d3 = self.se_d3(self.asym_d3(torch.cat([
            self.reduce_f3_d3(f3),
            self.reduce_d4_d3(resample(d4, 2, "up")),
            self.reduce_f5_d3(resample(f5, 4, "up")),
        ], dim=1)))
        _check_finite("decoder.D3", d3)
        out = torch.sigmoid(resample(self.head(d3), 8, "up"))
        return _check_finite("head", out)


def build_model(config: ModelConfig) -> EffiSegNet:
    return EffiSegNet(config)


@dataclass
class ComponentCount:
    name: str
    closed_form: int
    introspected: int
    decoder_side: bool


@dataclass
class ParameterAudit:
    per_component: List[ComponentCount]
    total: int
    reference_total: int = REFERENCE_TOTAL_PARAMS

    @property
    def signed_difference(self) -> int:
        return self.total - self.reference_total

    def mismatches(self) -> List[ComponentCount]:
        """Decoder-side components whose formula disagrees with introspection."""
        return [
            c for c in self.per_component
            if c.decoder_side and c.closed_form != c.introspected
        ]


def _numel(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_parameters(model: EffiSegNet) -> ParameterAudit:
    """Reconcile closed-form parameter formulas against introspected counts.

    Counts parameters (BN affine included, running statistics excluded)
    regardless of requires_grad: the budget is a property of the
    architecture, not of the freezing policy.
    """
    cfg = model.config
    rc = cfg.reduce_channels
    oc = cfg.decoder_out_channels
    c3, c4, c5 = model.encoder.feature_channels
    rows = [
        ComponentCount(
            f"encoder[{cfg.encoder.truncation}]",
            encoder_param_count(cfg.encoder.truncation),
            _numel(model.encoder),
            decoder_side=False,
        )
    ]
    decoder_parts = [
        ("reduce_f3_d4", "reduce", c3, rc, model.reduce_f3_d4),
        ("reduce_f4_d4", "reduce", c4, rc, model.reduce_f4_d4),
        ("reduce_f5_d4", "reduce", c5, rc, model.reduce_f5_d4),
        ("asym_d4", "asym", 3 * rc, oc, model.asym_d4),
        ("se_d4", "se", oc, oc, model.se_d4),
        ("reduce_f3_d3", "reduce", c3, rc, model.reduce_f3_d3),
        ("reduce_d4_d3", "reduce", oc, rc, model.reduce_d4_d3),
        ("reduce_f5_d3", "reduce", c5, rc, model.reduce_f5_d3),
        ("asym_d3", "asym", 3 * rc, oc, model.asym_d3),
        ("se_d3", "se", oc, oc, model.se_d3),
    ]
    for name, kind, c_in, c_out, module in decoder_parts:
        rows.append(ComponentCount(
            name,
            blocks.block_param_count(kind, c_in, c_out, cfg.se_ratio),
            _numel(module),
            decoder_side=True,
        ))
    rows.append(ComponentCount("head", oc * 1 + 1, _numel(model.head), decoder_side=True))
    return ParameterAudit(per_component=rows, total=sum(r.introspected for r in rows))


def format_audit(audit: ParameterAudit) -> str:
    """Aligned plain-text audit table with the signed budget difference."""
    width = max(len(c.name) for c in audit.per_component)
    lines = [f"{'component':<{width}}  {'closed-form':>11}  {'introspected':>12}  ok"]
    for c in audit.per_component:
        ok = "yes" if c.closed_form == c.introspected else "NO"
        lines.append(f"{c.name:<{width}}  {c.closed_form:>11,}  {c.introspected:>12,}  {ok}")
    lines.append(f"{'total':<{width}}  {'':>11}  {audit.total:>12,}")
    lines.append(
        f"reference total {audit.reference_total:,} "
        f"(difference {audit.signed_difference:+,})"
    )
    return "\n".join(lines)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["input_size"] = list(cfg.input_size)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    enc = d.pop("encoder", {})
    d["input_size"] = tuple(d.get("input_size", (224, 224)))
    return ModelConfig(encoder=EncoderConfig(**enc), **d)


def save_checkpoint(model: EffiSegNet, path, epoch: int = 0) -> dict:
    """Write model weights plus a manifest; returns the manifest."""
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "config": model_config_to_dict(model.config),
        "seed": model.config.seed,
        "epoch": epoch,
        "parameter_total": count_parameters(model).total,
    }
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)
    return manifest


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Tuple[EffiSegNet, dict]:
    """Rebuild a model from a checkpoint, verifying manifest and weights."""
    try:
        payload = torch.load(path, map_location="cpu")
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "manifest" not in payload or "state_dict" not in payload:
        raise CheckpointError(f"checkpoint {path} has no manifest/state_dict sections")
    manifest = payload["manifest"]
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {version!r} not supported (expected {CHECKPOINT_FORMAT!r})"
        )
    try:
        stored_config = model_config_from_dict(manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint {path} carries an invalid config: {exc}") from exc
    if expected_config is not None and stored_config != expected_config:
        raise CheckpointError(
            "checkpoint config does not match the expected config:\n"
            f"  stored:   {stored_config}\n  expected: {expected_config}"
        )
    # construct with random encoder init (checkpoint weights overwrite
    # everything), then restore the stored config verbatim
    build_config = replace(stored_config, encoder=replace(stored_config.encoder, init="random"))
    model = EffiSegNet(build_config)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} state dict rejected: {exc}") from exc
    model.config = stored_config
    total = count_parameters(model).total
    if total != manifest["parameter_total"]:
        raise CheckpointError(
            f"checkpoint parameter total {manifest['parameter_total']} does not match "
            f"the rebuilt model ({total})"
        )
    return model, manifest
