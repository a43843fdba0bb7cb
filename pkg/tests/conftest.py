"""Shared fixtures: a desk-scale config and matching synthetic weights."""

import numpy as np
import pytest

from cft.config import ModelConfig
from cft.tensor import DenseTensor
from cft.weights_io import generate_synthetic


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(coarse_grid=2, patch_px=4, embed_dim=32, depth=3,
                       heads=4, num_classes=7, ema_start=2)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return generate_synthetic(tiny_cfg, seed=2024)


@pytest.fixture()
def make_image(tiny_cfg):
    """Factory for standardized-looking random images sized for a config."""

    def build(seed=0, cfg=None):
        cfg = cfg or tiny_cfg
        rng = np.random.default_rng(seed)
        return DenseTensor(rng.standard_normal((3, cfg.image_px, cfg.image_px)) * 0.5)

    return build
