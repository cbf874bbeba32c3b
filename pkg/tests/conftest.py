import numpy as np
import pytest

from safempc.envs import make_cartpole, make_pendulum


@pytest.fixture(scope="session")
def pendulum_env():
    return make_pendulum()


@pytest.fixture(scope="session")
def cartpole_env():
    return make_cartpole(safe_set_budget=50.0)
