import pytest

from transitdesign.netmodel import DemandMatrix, Edge, RoadGraph
from transitdesign.transitsim import SimConfig


def make_graph(coords, pairs, hub=0, length=1000.0, speed=16.67):
    return RoadGraph(coords, [Edge(u, v, length, speed) for u, v in pairs], hub)


def path_graph(n, length=1000.0, speed=16.67):
    return make_graph([(i * length, 0.0) for i in range(n)], [(i, i + 1) for i in range(n - 1)], 0, length, speed)


def quiet_sim(**kw):
    """Simulator settings for hand traces: no congestion, no spawn jitter."""
    base = dict(congestion_coefficient=0.0, spawn_jitter=0)
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture
def triangle():
    return make_graph([(0, 0), (1, 0), (0, 1)], [(0, 1), (1, 2), (0, 2)], length=1.0)


@pytest.fixture
def empty_demand():
    return lambda n: DemandMatrix(n, {})


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
