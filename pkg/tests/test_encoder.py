import pytest
import torch
from torchvision.models import efficientnet_b0

from effiseg.encoder import (
    EncoderConfig,
    EfficientNetB0Encoder,
    encoder_param_count,
    load_encoder,
)
from effiseg.exceptions import ConfigError


def param_total(module):
    return sum(p.numel() for p in module.parameters())


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return set(sa) == set(sb) and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestShapes:
    def test_stride_contract_224(self):
        enc = load_encoder(EncoderConfig(init="random", seed=0)).eval()
        with torch.no_grad():
            f = enc(torch.randn(2, 3, 224, 224))
        assert f.f3.shape == (2, 40, 28, 28)
        assert f.f4.shape == (2, 112, 14, 14)
        assert f.f5.shape == (2, 320, 7, 7)

    def test_stride_contract_256(self):
        enc = load_encoder(EncoderConfig(init="random", seed=0)).eval()
        with torch.no_grad():
            f = enc(torch.randn(1, 3, 256, 256))
        assert f.f3.shape[2:] == (32, 32)
        assert f.f4.shape[2:] == (16, 16)
        assert f.f5.shape[2:] == (8, 8)

    @pytest.mark.parametrize("size", [32, 64, 224, 352])
    def test_stride_property_over_sizes(self, size):
        enc = load_encoder(EncoderConfig(init="random", seed=1)).eval()
        with torch.no_grad():
            f = enc(torch.randn(1, 3, size, size))
        assert f.f3.shape[2:] == (size // 8, size // 8)
        assert f.f4.shape[2:] == (size // 16, size // 16)
        assert f.f5.shape[2:] == (size // 32, size // 32)
        assert f.f3.shape[1] < f.f4.shape[1] < f.f5.shape[1]

    def test_rejects_wrong_channel_count(self):
        enc = load_encoder(EncoderConfig(init="random", seed=0))
        with pytest.raises(ValueError, match=r"\(n, 3, h, w\)"):
            enc(torch.zeros(1, 1, 224, 224))

    def test_rejects_indivisible_size(self):
        enc = load_encoder(EncoderConfig(init="random", seed=0))
        with pytest.raises(ValueError, match="divisible by 32"):
            enc(torch.zeros(1, 3, 100, 100))


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = load_encoder(EncoderConfig(init="random", seed=7))
        b = load_encoder(EncoderConfig(init="random", seed=7))
        assert state_equal(a, b)

    def test_different_seed_different_parameters(self):
        a = load_encoder(EncoderConfig(init="random", seed=7))
        b = load_encoder(EncoderConfig(init="random", seed=8))
        assert not state_equal(a, b)

    def test_features_bitwise_identical(self):
        x = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(5))
        outs = []
        for _ in range(2):
            enc = load_encoder(EncoderConfig(init="random", seed=7)).eval()
            with torch.no_grad():
                outs.append(enc(x))
        assert torch.equal(outs[0].f3, outs[1].f3)
        assert torch.equal(outs[0].f4, outs[1].f4)
        assert torch.equal(outs[0].f5, outs[1].f5)

    def test_inference_is_pure(self):
        enc = load_encoder(EncoderConfig(init="random", seed=3)).eval()
        x = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(6))
        with torch.no_grad():
            first = enc(x)
            second = enc(x)
        assert torch.equal(first.f5, second.f5)


class TestParameterCounts:
    @pytest.mark.parametrize("truncation", ["stage7-slim", "stage7-full"])
    def test_closed_form_matches_introspection(self, truncation):
        enc = load_encoder(EncoderConfig(init="random", seed=0, truncation=truncation))
        assert encoder_param_count(truncation) == param_total(enc)

    def test_slim_is_smaller_than_full(self):
        assert encoder_param_count("stage7-slim") < encoder_param_count("stage7-full")

    def test_rejects_unknown_truncation_in_count(self):
        with pytest.raises(ConfigError):
            encoder_param_count("stage9")

    def test_rejects_unknown_truncation_in_config(self):
        with pytest.raises(ConfigError, match="truncation"):
            EncoderConfig(init="random", truncation="stage9")

    def test_rejects_unknown_init(self):
        with pytest.raises(ConfigError, match="init"):
            EncoderConfig(init="imagenet")


class TestWeightLoading:
    def test_local_weight_file_roundtrip(self, tmp_path):
        # a full-backbone state dict stands in for a pretrained source
        donor = efficientnet_b0(weights=None)
        weights = tmp_path / "b0.pth"
        torch.save(donor.state_dict(), weights)
        pretrained = load_encoder(
            EncoderConfig(init="pretrained", weights_path=str(weights)))
        assert torch.equal(
            pretrained.to_f3[0][0].weight, donor.features[0][0].weight)

    def test_pretrained_and_random_agree_on_shapes_and_counts(self, tmp_path):
        donor = efficientnet_b0(weights=None)
        weights = tmp_path / "b0.pth"
        torch.save(donor.state_dict(), weights)
        pretrained = load_encoder(
            EncoderConfig(init="pretrained", weights_path=str(weights)))
        random = load_encoder(EncoderConfig(init="random", seed=1234))
        sp, sr = pretrained.state_dict(), random.state_dict()
        assert set(sp) == set(sr)
        assert all(sp[k].shape == sr[k].shape for k in sp)
        assert param_total(pretrained) == param_total(random)
        assert not state_equal(pretrained, random)

    def test_missing_weight_file_is_loud(self):
        with pytest.raises(RuntimeError, match="failed to load"):
            load_encoder(EncoderConfig(init="pretrained", weights_path="/nonexistent/w.pth"))

    def test_corrupt_weight_file_is_loud(self, tmp_path):
        bad = tmp_path / "bad.pth"
        bad.write_bytes(b"not a torch file")
        with pytest.raises(RuntimeError, match="failed to load"):
            load_encoder(EncoderConfig(init="pretrained", weights_path=str(bad)))

    def test_wrong_layout_weight_file_is_loud(self, tmp_path):
        wrong = tmp_path / "wrong.pth"
        torch.save({"some.layer.weight": torch.zeros(3)}, wrong)
        with pytest.raises(RuntimeError, match="layout"):
            load_encoder(EncoderConfig(init="pretrained", weights_path=str(wrong)))


def test_trainable_flag_freezes_parameters():
    frozen = load_encoder(EncoderConfig(init="random", seed=0, trainable=False))
    assert all(not p.requires_grad for p in frozen.parameters())
    trainable = load_encoder(EncoderConfig(init="random", seed=0, trainable=True))
    assert all(p.requires_grad for p in trainable.parameters())
