"""Shared fixtures: builtin games, regularizer sets and noise models."""

import numpy as np
import pytest

from src.sgd_builtins import harmonic_2x2x2, matching_pennies, prisoners_dilemma, zero_game
from src.sgd_noise import uncorrelated_noise
from src.sgd_regularization import RegularizerSet


@pytest.fixture
def mp():
    return matching_pennies()[0]


@pytest.fixture
def mp_structure():
    return matching_pennies()[1]


@pytest.fixture
def pd():
    return prisoners_dilemma()[0]


@pytest.fixture
def harmonic():
    return harmonic_2x2x2(1.0, 2.0, 3.0, 4.0, 5.0)


@pytest.fixture
def zero2():
    return zero_game((2, 2))[0]


@pytest.fixture
def entropic2():
    return RegularizerSet.uniform("entropic", 2)


@pytest.fixture
def noise_02():
    return uncorrelated_noise((2, 2), 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
