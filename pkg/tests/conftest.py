import numpy as np
import pytest
import torch

from cagan.datamodel import generate_procedural_set
from cagan.trainer import TrainConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_procedural_set(6, 32, seed=3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(stages=2, epochs=1, image_size=32, base_width=4, seed=5, log_every=0)


def random_soft_masks(rng, h, w, c=8):
    raw = rng.random((h, w, c)) ** 3
    return raw / raw.sum(axis=-1, keepdims=True)
