import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mlpath.measure import DiscretePath, TimeGrid

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def smooth_paths(grid: TimeGrid, count: int, seed: int, start: float = 0.0, end=None, amplitude=1.0):
    """Random smooth paths: a linear part plus a few sine modes, pinned at ``start``
    (and at ``end`` when given)."""
    rng = np.random.default_rng(seed)
    s = grid.nodes / grid.horizon
    out = []
    for _ in range(count):
        stop = end if end is not None else start + amplitude * rng.normal()
        v = start + (stop - start) * s
        for k in range(1, 4):
            v = v + amplitude * rng.normal() / k * np.sin(np.pi * k * s)
        if end is None:
            v = v + amplitude * rng.normal() * np.sin(0.5 * np.pi * s) ** 2
        v[0] = start
        if end is not None:
            v[-1] = end
        out.append(DiscretePath(grid, v))
    return out


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 1000)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
