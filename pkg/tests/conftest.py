import numpy as np
import pytest
import torch

from unirgbir.core import ImagePair, ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(dim=16, stem_channels=8, vit_blocks=4, vit_heads=2, deform_heads=2,
                       deform_points=2, image_size=64)


def random_pair(rng, size=64):
    return ImagePair(rng.random((size, size, 3)).astype(np.float32),
                     rng.random((size, size, 1)).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
