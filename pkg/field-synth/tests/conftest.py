import numpy as np
import pytest
import torch

from app.modules.models import EmbeddingConfig, NetworkConfig, PhantomSpec, TrainConfig
from app.modules.volumes import make_phantom


@pytest.fixture
def small_phantom():
    """16^3 phantom with noisy background, so background sigma is non-zero."""
    spec = PhantomSpec.for_dims((16, 16, 16), background=0.05, background_noise_std=0.01)
    return make_phantom(spec, seed=3)


@pytest.fixture
def phantom_64():
    spec = PhantomSpec(background=0.05, background_noise_std=0.01)
    return make_phantom(spec, seed=0)


@pytest.fixture
def tiny_train_config():
    """Reduced network and budget for fast training-loop tests."""
    return TrainConfig(
        iterations=5,
        patch_size=4,
        batch_patches=2,
        seed=0,
        embedding=EmbeddingConfig(num_frequencies=2),
        network=NetworkConfig(hidden_layers=2, hidden_features=8),
    )


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield
