from importlib import resources

import numpy as np
import pytest

from topoqd.dc_engine import DCEngine
from topoqd.grid import grid_from_dict, load_grid
from topoqd.importer import build_action_set


def data_path(name: str) -> str:
    return str(resources.files("topoqd") / "data" / name)


@pytest.fixture(scope="session")
def ieee14():
    return load_grid(data_path("ieee14.json"))


@pytest.fixture(scope="session")
def congestion14():
    return load_grid(data_path("congestion14.json"))


@pytest.fixture(scope="session")
def congestion_actions(congestion14):
    return build_action_set(congestion14)


@pytest.fixture(scope="session")
def congestion_engine(congestion14, congestion_actions):
    return DCEngine(congestion14, congestion_actions, 3, 2)


@pytest.fixture(scope="session")
def ieee14_actions(ieee14):
    return build_action_set(ieee14)


def triangle_doc(x=(0.1, 0.1, 0.1), limits=(100.0, 100.0, 100.0), outages=()):
    """Nodes A, B, C with branches AB, BC, AC; 90 MW generated at A, consumed at C."""
    return {
        "slack": "C",
        "nodes": [{"id": "A"}, {"id": "B"}, {"id": "C"}],
        "branches": [
            {"id": "AB", "from": "A", "to": "B", "x_pu": x[0], "limit_mw": limits[0]},
            {"id": "BC", "from": "B", "to": "C", "x_pu": x[1], "limit_mw": limits[1]},
            {"id": "AC", "from": "A", "to": "C", "x_pu": x[2], "limit_mw": limits[2]},
        ],
        "injections": [
            {"id": "G", "node": "A", "p_mw": 90.0, "q_mvar": 0.0, "kind": "generator"},
            {"id": "D", "node": "C", "p_mw": -90.0, "q_mvar": 0.0, "kind": "load"},
        ],
        "contingencies": [{"id": f"out {b}", "branches": [b], "injections": []} for b in outages],
    }


@pytest.fixture
def triangle():
    return grid_from_dict(triangle_doc())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
