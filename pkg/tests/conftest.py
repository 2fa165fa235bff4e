import numpy as np
import pytest

from uformer import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def trained_tiny():
    """A tiny model after a short denoising run (shared across tests)."""
    from uformer.data import Degradation
    from uformer.model import build, tiny_config
    from uformer.train import TrainConfig, train_loop

    cfg = TrainConfig(
        total_steps=150, batch_size=4, patch_size=32, num_patches=16, val_patches=0, val_every=0,
        lr_start=2e-3, degradation=Degradation(sigma=0.1),
    )
    params = build(tiny_config(), seed=0)
    train_loop(params, cfg)
    return params
