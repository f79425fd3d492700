import numpy as np
import pytest

from mcmot.fixtures import demo_payoff, demo_system


@pytest.fixture(scope="session")
def demo():
    return demo_system()


@pytest.fixture(scope="session")
def demo_cost():
    return demo_payoff()


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
