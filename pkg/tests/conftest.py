import numpy as np
import pytest
import torch

from refboost.boost import BoostOperator
from refboost.plant import Plant, RobotParams, corridor_layout
from refboost.ren import DTYPE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corridor_plant():
    return Plant(RobotParams(), corridor_layout())


@pytest.fixture
def small_boost(corridor_plant):
    p = corridor_plant.params
    return BoostOperator(
        p.aug_dim, p.plant_dim, p.ctrl_dim, rng=np.random.default_rng(7)
    )


def tensor(x):
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
