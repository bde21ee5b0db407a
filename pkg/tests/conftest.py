import numpy as np
import pytest

from safemil.cmdp import build_hazard_grid, build_speed_chain
from safemil.config import preset
from safemil.experiment import generate_datasets


@pytest.fixture(scope="session")
def chain():
    return build_speed_chain()


@pytest.fixture(scope="session")
def grid():
    return build_hazard_grid()


@pytest.fixture(scope="session")
def chain_data(chain):
    return generate_datasets(chain, preset("speed_chain"), seed=0)


@pytest.fixture(scope="session")
def grid_data(grid):
    return generate_datasets(grid, preset("hazard_grid"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_TITLES = {
    1: "bag containment frequency matches 1-(1-alpha)^K",
    2: "bag scores invariant to segment order",
    3: "loss gradients match finite differences",
    4: "occupancy LP matches deterministic enumeration",
    5: "cost model separates non-preferred transitions",
    6: "SafeMIL-trajectory is safe without losing return",
    7: "larger bags are at least as safe (K=128 vs K=1)",
    8: "safety is stable across segment lengths",
    9: "trajectory and transition weighting agree",
    10: "metric fixed points for reference and random policies",
    11: "CVaR examples and monotonicity",
    12: "end-to-end determinism of the default suite",
}


def pytest_configure(config):
    config.acceptance_results = {}
    config.acceptance_selected = set()


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            session.config.acceptance_selected.add(mark.args[0])


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one (ok, detail) outcome per numbered acceptance check."""
    results = request.config.acceptance_results

    def record(number, ok, detail=""):
        results[number] = (bool(ok), detail)
        print(f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {ACCEPTANCE_TITLES[number]}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.acceptance_results
    selected = sorted(config.acceptance_selected)
    if not selected:
        return
    terminalreporter.section("acceptance")
    for number in selected:
        title = ACCEPTANCE_TITLES[number]
        ok, detail = results.get(number, (False, "did not run to completion"))
        terminalreporter.write_line(f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")
