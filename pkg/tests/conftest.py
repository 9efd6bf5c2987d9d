import numpy as np
import pytest

from evoattack.datasets import gen_synthetic, split
from evoattack.models import ModelConfig, train


@pytest.fixture(scope="session")
def synth_split():
    data = gen_synthetic(10, 100, seed=0)
    return split(data, 0.8, seed=0)


@pytest.fixture(scope="session")
def trained(synth_split):
    train_set, _ = synth_split
    return {kind: train(ModelConfig(kind=kind), train_set, seed=0) for kind in ("lr", "dnn", "cnn")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
