import numpy as np
import pytest

from mulaaip.autodiff import Rng
from mulaaip.synthetic import random_protein


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def protein():
    return random_protein(Rng(7), 20, ("A", "B"), "fixture")
