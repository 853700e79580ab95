import pytest

from mfdb.model import SystemParams, scenario_preset
from mfdb.solver import build_grid, solve_mfdb


def small_setup(scenario="h3", frames=4, **kw):
    """Short horizon and a coarse grid so a full solve takes about a second."""
    params = SystemParams(frames=frames, **kw)
    sc = scenario_preset(scenario)
    grid = build_grid(params, sc, n_energy=21, n_gain=11, samples_per_slot=4)
    return params, sc, grid


@pytest.fixture(scope="session")
def small_solution():
    params, sc, grid = small_setup()
    sol, _ = solve_mfdb(params, sc, grid=grid)
    return sol


@pytest.fixture(scope="session")
def small_cc_solution():
    params, sc, grid = small_setup("cc")
    sol, _ = solve_mfdb(params, sc, grid=grid)
    return sol


@pytest.fixture
def make_small():
    return small_setup


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def record():
    """Collect one verdict line per acceptance criterion for the summary."""

    def _record(number, passed, detail):
        _ACCEPTANCE[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
