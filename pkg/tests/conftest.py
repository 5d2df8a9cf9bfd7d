import logging

import numpy as np
import pytest

from parainverse.forward import default_problem, solve
from parainverse.grid import Grid


@pytest.fixture(autouse=True)
def _quiet_fold_warning(caplog):
    # The fold notice fires on every fine partition; it is expected.
    caplog.set_level(logging.ERROR, logger="parainverse.dyadic")


@pytest.fixture(scope="session")
def grid():
    return Grid.uniform(256)


@pytest.fixture(scope="session")
def coarse_grid():
    return Grid.uniform(128)


@pytest.fixture(scope="session")
def grid2d():
    return Grid.uniform(32, dim=2)


@pytest.fixture(scope="session")
def rng_seed():
    return 20240611


@pytest.fixture
def rng(rng_seed):
    return np.random.default_rng(rng_seed)


@pytest.fixture(scope="session")
def nonlinear_run(grid):
    spec = default_problem(grid)
    return spec, solve(spec)


@pytest.fixture(scope="session")
def linear_run(grid):
    spec = default_problem(grid, linear=True)
    return spec, solve(spec)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
