import numpy as np
import pytest

from piddpg.hexgrid import GridMap
from piddpg.market import ScenarioProfile


def make_profile(radius=1, horizon=3, platforms=1, supply=0.0, demand=0.0, **kw):
    grid = GridMap.hexagon(radius)
    n = grid.n_cells
    sm = np.broadcast_to(np.asarray(supply, dtype=float), (platforms, horizon)).copy() if np.ndim(supply) < 2 else np.asarray(supply, float)
    dm = np.broadcast_to(np.asarray(demand, dtype=float), (horizon, n, 3)).copy() if np.ndim(demand) < 3 else np.asarray(demand, float)
    dest = kw.pop("destinations", np.full((n, n), 1.0 / n))
    return ScenarioProfile(grid, horizon, sm, dm, dest, **kw)


@pytest.fixture
def grid1():
    return GridMap.hexagon(1)


@pytest.fixture
def grid3():
    return GridMap.hexagon(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
