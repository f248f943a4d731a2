import pytest
import torch

from effiseg.data import CLINICDB, KVASIR
from effiseg.encoder import EncoderConfig
from effiseg.model import ModelConfig

from synth import write_corpus

torch.set_num_threads(max(1, torch.get_num_threads()))


def reduced_model_config(input_size=(32, 32), seed=5, encoder_seed=3):
    """Small configuration used for gradient checks and fast training tests."""
    return ModelConfig(
        reduce_channels=8,
        se_ratio=4,
        decoder_out_channels=8,
        input_size=input_size,
        encoder=EncoderConfig(init="random", seed=encoder_seed),
        seed=seed,
    )


@pytest.fixture
def reduced_config():
    return reduced_model_config()


@pytest.fixture(scope="session")
def small_corpus_root(tmp_path_factory):
    """Tiny stand-in corpora for CLI and data-layout tests."""
    root = tmp_path_factory.mktemp("small_corpora")
    write_corpus(root, KVASIR, 30, size=(16, 16), seed=1)
    write_corpus(root, CLINICDB, 20, size=(16, 16), seed=2)
    return root


@pytest.fixture(scope="session")
def full_corpus_root(tmp_path_factory):
    """Synthetic stand-ins with the real corpus sizes (1000 + 612)."""
    root = tmp_path_factory.mktemp("full_corpora")
    write_corpus(root, KVASIR, 1000, size=(12, 12), seed=11)
    write_corpus(root, CLINICDB, 612, size=(12, 12), seed=12)
    return root
