import pytest

from legomanip.learn import Simulator
from legomanip.pipeline import deterministic


@pytest.fixture(scope="session")
def sim():
    return Simulator.default()


@pytest.fixture(scope="session")
def det_sim(sim):
    return deterministic(sim)
