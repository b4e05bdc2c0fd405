import numpy as np
import pytest
import torch

from difa.backbones import load_backbones
from difa.trainer import sample_z


@pytest.fixture(scope="session")
def toy():
    return load_backbones("toy", 0)


@pytest.fixture(scope="session")
def toy_images(toy):
    with torch.no_grad():
        return toy.generator.generate(sample_z(11, 4, toy.generator.z_dim))


@pytest.fixture(scope="session")
def hue_reference(toy):
    """A toy sample with its colour channels rotated (R<-G, G<-B, B<-R)."""
    with torch.no_grad():
        return toy.generator.generate(sample_z(12345, 1, toy.generator.z_dim))[:, [1, 2, 0]]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
