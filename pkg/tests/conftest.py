import numpy as np
import pytest

from saclt import StepSchedule


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def slow_schedule():
    return StepSchedule(gamma_star=1.0, exponent_a=0.7)


@pytest.fixture
def fast_schedule():
    return StepSchedule(gamma_star=1.0, exponent_a=1.0)


def random_hurwitz(rng, d, margin):
    """A d x d matrix whose spectrum is shifted to max real part exactly -margin."""
    G = rng.uniform(-1.0, 1.0, size=(d, d))
    shift = np.max(np.linalg.eigvals(G).real) + margin
    return G - shift * np.eye(d)


def random_spd(rng, d, floor=0.1):
    R = rng.uniform(-1.0, 1.0, size=(d, d))
    return R @ R.T + floor * np.eye(d)


def random_ergodic_kernel(rng, S):
    """Row-stochastic with entries bounded away from 0, hence ergodic."""
    Q = rng.uniform(0.05, 1.0, size=(S, S))
    return Q / Q.sum(axis=1, keepdims=True)
