import numpy as np
import pytest

from segvae.model import ModelConfig, build_model
from segvae.rng import Rng


def tiny_config(**over) -> ModelConfig:
    """Small but structurally complete model config for fast tests."""
    base = dict(seg_len=8, n_features=6, feature_kind="fbank",
                conv_channels=(3, 4, 5), fc_units=10, latent_dim=4)
    base.update(over)
    return ModelConfig(**base)


def tiny_model(seed=0, **over):
    cfg = tiny_config(**over)
    return build_model(cfg, Rng.from_seed(seed, "init"))


def random_db(shape, seed=0, lo=-18.0, hi=30.0):
    """Random dB-scale segments respecting the -20 dB floor."""
    u = Rng.from_seed(seed, "testdata").uniform(shape)
    return (lo + (hi - lo) * u).astype(np.float32)


@pytest.fixture
def rng():
    return Rng.from_seed(1234, "fixture")
