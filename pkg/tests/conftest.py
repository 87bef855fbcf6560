import numpy as np
import pytest
import torch

from motionflow.data_synth import OracleSpec, generate_dataset
from motionflow.dit import ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=16, n_heads=2, n_four_stream=1, n_two_stream=1, n_single_stream=1,
                       audio_dim=8, num_emotions=4, time_freq_dim=16)


@pytest.fixture(scope="session")
def small_spec():
    return OracleSpec(seed=3, n_clips=12, clip_frames=40, audio_dim=8, n_identities=3)


@pytest.fixture(scope="session")
def small_clips(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_(model, std=0.2, seed=0):
    """Overwrite every parameter (including zero-initialised ones) with noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return model
