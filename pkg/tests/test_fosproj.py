import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph, path_graph
from oracles import brute_loads, lexmin_shortest_path, route_adj
from transitdesign import fosproj as fp
from transitdesign.citygen import grid_city
from transitdesign.netmodel import DemandMatrix


def test_single_route_loads():
    g = path_graph(3)
    loads = fp.assign_segment_loads(g, [[0, 1, 2]], DemandMatrix(3, {(0, 2): 10}))
    assert loads.per_route == [{(0, 1): 10.0, (1, 2): 10.0}]


def test_overlap_division():
    g = path_graph(2)
    loads = fp.assign_segment_loads(g, [[0, 1], [0, 1]], DemandMatrix(2, {(0, 1): 10}))
    assert loads.per_route == [{(0, 1): 5.0}, {(0, 1): 5.0}]


def test_zero_alpha():
    g = path_graph(3)
    loads = fp.assign_segment_loads(g, [[0, 1, 2]], DemandMatrix(3, {(0, 2): 10}, alpha=0.0))
    assert all(q == 0 for q in loads.per_route[0].values())


def test_frequency_examples():
    L = fp.SegmentLoads
    assert fp.max_load_frequencies(L([{(0, 1): 0.0}, {}]), 40) == [1, 1]
    assert fp.max_load_frequencies(L([{(0, 1): 100.0}]), 40, 1.0) == [3]
    assert fp.max_load_frequencies(L([{(0, 1): 40.0}]), 40, 1.0) == [1]
    with pytest.raises(ValueError):
        fp.max_load_frequencies(L([{}]), 0)


def test_minimality_examples():
    L = fp.SegmentLoads
    loads = L([{(0, 1): 100.0}, {(1, 2): 0.0}])
    assert fp.max_load_frequencies(loads, 40) == [3, 1]
    assert fp.verify_minimality(loads, 40, 1.0)
    assert fp.verify_minimality(L([{(0, 1): 0.0}, {(0, 1): 0.0}]), 40, 1.0)


def test_minimality_rejects_a_bad_projection(monkeypatch):
    loads = fp.SegmentLoads([{(0, 1): 100.0}])
    monkeypatch.setattr(fp, "max_load_frequencies", lambda *a, **k: [4])
    assert not fp.verify_minimality(loads, 40, 1.0)


def test_fleet_examples():
    # 1680 s of travel plus 2 stops x 60 s dwell, both ways: T = 3600 s
    g = make_graph([(0, 0), (16800, 0)], [(0, 1)], length=16800.0, speed=10.0)
    plan = fp.fleet_size(g, [[0, 1]], [2], dwell=60)
    assert plan.round_trip_s == [pytest.approx(3600.0)]
    assert plan.per_route == [2]
    assert fp.fleet_size(g, [[0, 1]], [1], dwell=60).per_route == [1]
    short = make_graph([(0, 0), (100, 0)], [(0, 1)], length=100.0, speed=10.0)
    plan = fp.fleet_size(short, [[0, 1]], [1], dwell=20)  # T = 2 * (10 + 40) = 100 s
    assert plan.round_trip_s == [pytest.approx(100.0)] and plan.per_route == [1] and plan.total == 1
    with pytest.raises(ValueError):
        fp.fleet_size(g, [[0, 1]], [0], dwell=60)


def random_design(seed, rows=3, cols=4, k=3, max_len=5):
    net = grid_city(rows, cols, demand_pairs=25, seed=seed)
    rng = np.random.default_rng(seed)
    routes = []
    for _ in range(k):
        r = [int(rng.integers(net.graph.n))]
        for _ in range(int(rng.integers(1, max_len))):
            c = [v for v in net.graph.adj[r[-1]] if v not in r]
            if not c:
                break
            r.append(int(rng.choice(c)))
        routes.append(r)
    return net, routes


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), alpha=st.sampled_from([0.3, 0.7, 1.0]))
def test_loads_match_path_oracle(seed, alpha):
    net, routes = random_design(seed)
    got = fp.assign_segment_loads(net.graph, routes, net.demand, alpha).per_route
    want = brute_loads(routes, net.demand.entries, alpha)
    assert len(got) == len(want)
    for g_r, w_r in zip(got, want):
        assert g_r.keys() == w_r.keys()
        for s in w_r:
            assert g_r[s] == pytest.approx(w_r[s], abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_load_conservation(seed):
    net, routes = random_design(seed)
    raw = fp.raw_segment_flows(routes, net.demand)
    adj = route_adj(routes)
    expected = 0.0
    for (o, d), rate in net.demand.entries.items():
        if o != d and o in adj and d in adj:
            p = lexmin_shortest_path(adj, o, d)
            if p:
                expected += net.demand.transit(o, d) * (len(p) - 1)
    assert sum(raw.values()) == pytest.approx(expected)


loads_strategy = st.lists(
    st.lists(st.floats(0, 200, allow_nan=False), min_size=1, max_size=4), min_size=1, max_size=4
)


def to_loads(rows):
    return fp.SegmentLoads([{(i, i + 1): q for i, q in enumerate(r)} for r in rows])


@settings(max_examples=200, deadline=None)
@given(rows=loads_strategy)
def test_projection_minimal_and_idempotent(rows):
    loads = to_loads(rows)
    f = fp.max_load_frequencies(loads, 40, 1.0)
    assert f == fp.max_load_frequencies(loads, 40, 1.0)
    assert all(x >= 1 for x in f)
    assert fp.verify_minimality(loads, 40, 1.0)


@settings(max_examples=200, deadline=None)
@given(rows=loads_strategy, bump=st.floats(0, 100), data=st.data())
def test_projection_monotone(rows, bump, data):
    k = data.draw(st.integers(0, len(rows) - 1))
    i = data.draw(st.integers(0, len(rows[k]) - 1))
    before = fp.max_load_frequencies(to_loads(rows), 40, 1.0)
    rows[k][i] += bump
    after = fp.max_load_frequencies(to_loads(rows), 40, 1.0)
    assert all(a >= b for a, b in zip(after, before))


def test_brute_force_feasible_set_by_hand():
    loads = to_loads([[100.0], [45.0]])
    feasible = [c for c in itertools.product(range(1, 7), repeat=2) if fp.is_capacity_feasible(loads, c, 40, 1.0)]
    assert min(feasible) == (3, 2)
    assert all(a >= 3 and b >= 2 for a, b in feasible)
