import numpy as np
import pytest

from lirl.config import Config
from lirl.constraints import ProblemScale
from lirl.env import AssemblyEnv, RewardWeights


@pytest.fixture(scope="session")
def cfg():
    return Config.reference()


@pytest.fixture(scope="session")
def system(cfg):
    return cfg.system


@pytest.fixture(scope="session")
def weights(cfg):
    return cfg.weights()


def make_env(system, label="J10R3", alpha=0.5, disturb=None, weights=None):
    from lirl.env import DisturbanceConfig

    scale = ProblemScale.parse(label)
    w = weights or RewardWeights(alpha, (100.0, 10.0), (3000.0, 100.0))
    return AssemblyEnv(system, scale, w, disturb or DisturbanceConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
