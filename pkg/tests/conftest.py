import numpy as np
import pytest

from corrpin.model import build_model, build_state_space


@pytest.fixture(scope="session")
def m_q1():
    return build_model(1.5, 1, [1.0, 0.6], n_cut=2000)


@pytest.fixture(scope="session")
def m_q2():
    return build_model(1.2, 2, [0.8, 0.4, 0.447], n_cut=2000)


@pytest.fixture(scope="session")
def m_mixed():
    """q = 2 with correlations of both signs, alpha > 1."""
    return build_model(1.5, 2, [1.0, 0.5, -0.3], n_cut=10_000)


@pytest.fixture(scope="session")
def ss_mixed(m_mixed):
    return build_state_space(m_mixed)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
