import numpy as np
import pytest

from physguide.character import CharacterModel
from physguide.datagen import build_dataset
from physguide.motion import Condition, Motion
from physguide.sim import SimConfig, rest_depth, standing_pose


@pytest.fixture(scope="session")
def character():
    return CharacterModel()


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig()


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(None, {"stand": 6, "walk": 6, "hop": 6}, H=20, seed=3, write=False)


def resting_stand(character, H=20, lift=0.0):
    """Standing pose sunk to its static rest depth (plus an optional lift)."""
    q = standing_pose(character).vector()
    q[1] += lift - rest_depth(character, SimConfig()) / 2
    return Motion(np.tile(q, (H, 1)), 30.0, Condition("stand"), character)
