import numpy as np
import pytest

from disjqp.assimilation import ExperimentConfig, build_experiment_inputs
from disjqp.qp_core import DisjointQP


def make_qp_a(g_y=-2.0):
    """n=2, p=1, m=1 with P = 2I; solution x=(0.5, 0.5), y=1 for g_y=-2."""
    return DisjointQP(
        g_x=np.array([-2.0, -2.0]), g_y=np.array([g_y]),
        P_xx=2 * np.eye(2), P_xy=np.zeros((2, 1)), P_yy=np.array([[2.0]]),
        A=np.array([[1.0, 1.0]]), b=np.array([1.0]), lower=np.zeros(1))


@pytest.fixture
def qp_a():
    return make_qp_a()


@pytest.fixture
def qp_b():
    return make_qp_a(g_y=2.0)


@pytest.fixture(scope="session")
def twin_inputs():
    """Model runs, observations and covariance of the default experiment (seed 0)."""
    cfg = ExperimentConfig(seed=0)
    return cfg, build_experiment_inputs(cfg)


@pytest.fixture(scope="session")
def small_twin_inputs():
    """A cheaper experiment: small ensemble, same grid."""
    cfg = ExperimentConfig(seed=3, ensemble_size=200)
    return cfg, build_experiment_inputs(cfg)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one summary line per acceptance criterion."""
    return pytestconfig.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
