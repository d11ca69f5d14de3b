import logging
import os

import numpy as np
import pytest

from src.core.envs import (
    PathPlanningConfig,
    build_closed_instance,
    build_path_planning,
    build_random_instance,
    build_revealing_toy,
)
from src.core.model import ModelSpec, ParamSpace
from src.core.settings import get_settings

# Configure logging for tests
logging.basicConfig(level=logging.INFO)


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Each test sees settings built from a clean environment."""
    for key in list(os.environ):
        if key.startswith("BRMDP_") and key != "BRMDP_RUN_SLOW":
            monkeypatch.delenv(key, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def random_instance(rng):
    """3 states, 2 actions, 3 outcomes, 2 parameters, gamma 0.9."""
    return build_random_instance(rng)


@pytest.fixture
def closed_instance(rng):
    """Instance whose reachable beliefs are the start belief and the corners."""
    return build_closed_instance(rng)


@pytest.fixture
def revealing_toy():
    return build_revealing_toy()


@pytest.fixture
def corridor():
    """Two lane cells side by side: start on the left, goal on the right."""
    cfg = PathPlanningConfig(
        road_map=["LL"],
        start=(0, 0),
        goal=(0, 1),
        rate_grid={},
        accident_grid={},
        bins=2,
    )
    return build_path_planning(cfg)


@pytest.fixture
def desk_pathplanning():
    return build_path_planning()


@pytest.fixture
def chain() -> ModelSpec:
    """
    Two states, two actions, one parameter: action 0 stays at cost 1, action 1
    moves to the absorbing state 1 at cost 5.
    """
    next_state = np.array([[[0, 0], [1, 1]], [[1, 1], [1, 1]]])
    cost = np.array([[[1.0, 1.0], [5.0, 5.0]], [[0.0, 0.0], [0.0, 0.0]]])
    return ModelSpec(
        params=ParamSpace(thetas=np.array([0.0])),
        admissible=np.array([[True, True], [True, False]]),
        next_state=next_state,
        cost=cost,
        likelihood=np.array([[0.5], [0.5]]),
        discount=0.9,
        name="chain",
    )
