import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from signedbary import Grid, Problem, gaussian_on_grid

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def line256():
    return Grid([0.0], [1.0], [256])


@pytest.fixture(scope="session")
def square32():
    return Grid([0.0, 0.0], [1.0, 1.0], [32, 32])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def two_gaussians(grid, m0=0.3, m1=0.7, sd=0.05, a=(0.5, 0.5)):
    return Problem.build(list(a), [gaussian_on_grid(grid, [m0], sd), gaussian_on_grid(grid, [m1], sd)])


@pytest.fixture(scope="session")
def classical():
    """Converged dual solve of the two-Gaussian fixture on 256 nodes."""
    from signedbary.solver import SolverConfig, solve

    p = two_gaussians(Grid([0.0], [1.0], [256]))
    return p, solve(p, SolverConfig(max_iters=20000), diagnostics=False)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
