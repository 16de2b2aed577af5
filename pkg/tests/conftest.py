import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from brightsign import nn
from brightsign.data import generate_synthetic
from brightsign.zoo import desk_architectures


def random_model(arch, seed, name="rand"):
    """Untrained model with seeded He-uniform parameters."""
    params = nn.init_params(arch, np.random.default_rng(seed))
    return nn.TrainedModel(arch, nn._as_param_tuple(params), name=name)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(240, 4, (1, 16, 16), seed=31)


@pytest.fixture(scope="session")
def tiny_arch():
    return nn.Architecture((1, 16, 16), (nn.Flatten(), nn.Dense(24), nn.Relu(), nn.Dense(4)), 4)


@pytest.fixture(scope="session")
def tiny_model(tiny_arch, tiny_dataset):
    cfg = nn.TrainConfig(epochs=4, batch_size=32, seed=5)
    return nn.train(tiny_arch, tiny_dataset, cfg, name="tiny")


@pytest.fixture(scope="session")
def tiny_conv_model(tiny_dataset):
    arch = nn.Architecture(
        (1, 16, 16),
        (nn.Conv2d(3, 3, 4), nn.Relu(), nn.MaxPool2x2(), nn.Flatten(), nn.Dense(4)),
        4,
    )
    cfg = nn.TrainConfig(epochs=3, batch_size=32, seed=9)
    return nn.train(arch, tiny_dataset, cfg, name="tiny_conv")


@pytest.fixture(scope="session")
def desk_archs():
    return desk_architectures((1, 16, 16), 10)
