import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph, path_graph, quiet_sim
from oracles import lexmin_shortest_path, route_adj
from transitdesign import fosproj as fp
from transitdesign import transitsim as ts
from transitdesign.citygen import grid_city
from transitdesign.netmodel import DemandMatrix


def test_route_graph_examples():
    rg = ts.build_route_graph([[0, 1, 2]])
    assert rg.nodes == {0, 1, 2} and rg.segments == {(0, 1), (1, 2)}
    rg = ts.build_route_graph([[0, 1], [1, 2]])
    assert rg.routes_at(1) == [0, 1]
    rg = ts.build_route_graph([[0, 1], [5]])
    assert 5 in rg.nodes and rg.segments == {(0, 1)}


def test_itinerary_examples():
    it = ts.plan_itinerary(ts.build_route_graph([[0, 1, 2]]), 0, 2)
    assert it.transfers == 0 and [(l.route, l.board, l.alight) for l in it.legs] == [(0, 0, 2)]
    it = ts.plan_itinerary(ts.build_route_graph([[0, 1], [1, 2]]), 0, 2)
    assert it.transfers == 1 and [(l.route, l.board, l.alight) for l in it.legs] == [(0, 0, 1), (1, 1, 2)]
    assert ts.plan_itinerary(ts.build_route_graph([[0, 1], [2, 3]]), 0, 3) is None


def test_itinerary_reverse_direction():
    it = ts.plan_itinerary(ts.build_route_graph([[0, 1, 2]]), 2, 0)
    (leg,) = it.legs
    assert (leg.board, leg.alight, leg.direction) == (2, 0, -1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_itinerary_legs_are_consistent(seed):
    rng = np.random.default_rng(seed)
    net = grid_city(3, 4)
    routes = []
    for _ in range(3):
        r = [int(rng.integers(12))]
        for _ in range(4):
            c = [v for v in net.graph.adj[r[-1]] if v not in r]
            if not c:
                break
            r.append(int(rng.choice(c)))
        routes.append(r)
    rg = ts.build_route_graph(routes)
    adj = route_adj(routes)
    for o in adj:
        for d in adj:
            if o == d:
                continue
            it = ts.plan_itinerary(rg, o, d)
            p = lexmin_shortest_path(adj, o, d)
            assert (it is None) == (p is None)
            if it is None:
                continue
            assert it.legs[0].board == o and it.legs[-1].alight == d
            hops = 0
            for a, b in zip(it.legs, it.legs[1:]):
                assert a.alight == b.board
            for leg in it.legs:
                r = routes[leg.route]
                i, j = r.index(leg.board), r.index(leg.alight)
                assert i != j and leg.direction == (1 if j > i else -1)
                hops += abs(j - i)
            assert hops == len(p) - 1


def two_node():
    g = make_graph([(0, 0), (1000, 0)], [(0, 1)])
    return g, [[0, 1]]


def test_zero_demand_buses_still_run():
    g, routes = two_node()
    fleet = fp.fleet_size(g, routes, [2], 60)
    rep = ts.simulate(g, routes, [2], fleet, DemandMatrix(2, {}), quiet_sim())
    assert (rep.n_want, rep.n_comp, rep.n_ongoing, rep.n_waiting, rep.n_od) == (0, 0, 0, 0, 0)
    assert rep.n_bus == fleet.total and len(rep.bus_occupancy) == fleet.total
    m = ts.compute_metrics(rep)
    assert m.bus_utilization == 0 and m.service_rate == 0 and m.wait_time == 0


def test_single_passenger_trace():
    # 1 km at 16.67 m/s rounds up to 60 steps; the bus leaves stop 0 at t=0,
    # the passenger boards at once, and alights on arrival at t = 60 dwell + 60 travel
    g, routes = two_node()
    fleet = fp.fleet_size(g, routes, [1], 60)
    rep = ts.simulate(g, routes, [1], fleet, DemandMatrix(2, {}), quiet_sim(horizon=3600), passengers=[(0, 0, 1)])
    assert (rep.n_want, rep.n_comp, rep.n_ongoing, rep.n_waiting) == (1, 1, 0, 0)
    assert rep.wait_s == [0.0] and rep.move_s == [120.0]
    assert rep.n_transfer == 0


def test_capacity_one_fifo_trace():
    # route 2-0-1; the first forward bus reaches stop 0 at t=120 and the next one
    # at t=3720 (one bus, headway 3600). Capacity 1: the earlier arrival boards first.
    g = make_graph([(1000, 0), (2000, 0), (0, 0)], [(2, 0), (0, 1)], hub=2)
    routes = [[2, 0, 1]]
    fleet = fp.FleetPlan([1], [600.0])
    seen = []
    rep = ts.simulate(
        g, routes, [1], fleet, DemandMatrix(3, {}), quiet_sim(horizon=4000, bus_capacity=1),
        passengers=[(5, 0, 1), (10, 0, 1)], observer=lambda t, s: seen.append(s["max_load"]),
    )
    assert rep.n_comp == 2
    assert rep.wait_s == [115.0, 3710.0]
    assert rep.move_s == [120.0, 120.0]
    assert max(seen) == 1


def test_transfer_counted():
    g = path_graph(3)
    routes = [[0, 1], [1, 2]]
    fleet = fp.fleet_size(g, routes, [1, 1], 60)
    rep = ts.simulate(g, routes, [1, 1], fleet, DemandMatrix(3, {}), quiet_sim(horizon=4000), passengers=[(0, 0, 2)])
    assert rep.n_comp == 1 and rep.n_transfer == 1
    assert ts.compute_metrics(rep).transfer_rate == 100.0


def test_config_errors():
    g, routes = two_node()
    fleet = fp.FleetPlan([1], [0.0])
    d = DemandMatrix(2, {})
    with pytest.raises(ts.SimulationConfigError):
        ts.simulate(g, [], [], fp.FleetPlan([], []), d)
    with pytest.raises(ts.SimulationConfigError):
        ts.simulate(g, routes, [0], fleet, d)
    with pytest.raises(ts.SimulationConfigError):
        ts.simulate(g, routes, [1], fleet, d, quiet_sim(horizon=100))
    with pytest.raises(ts.SimulationConfigError):
        ts.simulate(g, [[0, 2]], [1], fleet, DemandMatrix(3, {}))


def test_metrics_examples():
    rep = ts.SimulationReport(n_want=100, n_comp=50, n_ongoing=10, total_route_km=10.0)
    m = ts.compute_metrics(rep)
    assert m.service_rate == pytest.approx(60.0)
    assert m.route_efficiency == pytest.approx(5.0)
    assert m.wait_time == 0 and m.journey_time == 0
    zero = ts.compute_metrics(ts.SimulationReport())
    assert (zero.service_rate, zero.transfer_rate, zero.wait_time) == (0, 0, 0)


def test_overlap_examples():
    assert ts.overlap_ratio([[0, 1, 2], [0, 1, 2]]) == 1.0
    assert ts.overlap_ratio([[0, 1], [2, 3]]) == 0.0
    # 4 unique segments, (0,1) shared by both routes
    assert ts.overlap_ratio([[0, 1, 2], [0, 1, 3, 4]]) == pytest.approx(0.25)
    assert ts.overlap_ratio([[0, 1, 2]]) == 0.0
    assert ts.overlap_ratio([[0, 1], [0]]) == 0.0


def test_congestion_slows_links():
    net = grid_city(3, 3, demand_pairs=40, total_rate=5000, seed=1)
    d = net.demand.with_alpha(0.3)
    fast = ts.link_steps(net.graph, d, quiet_sim())
    slow = ts.link_steps(net.graph, d, ts.SimConfig(congestion_coefficient=0.15))
    assert all(slow[s] >= fast[s] for s in fast)
    assert any(slow[s] > fast[s] for s in fast)


def test_access_radius_reaches_unserved_nodes():
    g = path_graph(4, length=300.0)
    routes = [[0, 1]]
    rg = ts.build_route_graph(routes)
    acc = ts.AccessMap(g, rg, 500.0)
    it = acc.plan(rg, 2, 0)  # node 2 is 300 m from stop 1
    assert it is not None and it.legs[0].board == 1
    assert acc.plan(rg, 3, 0) is None or acc.plan(rg, 3, 0).legs[0].board == 1
    assert ts.AccessMap(g, rg, 0.0).plan(rg, 2, 0) is None


def test_transfer_wait_includes_second_leg():
    # leg 1 boards at t=0 and reaches stop 1 at t=120; route 1 next leaves stop 1 at t=3600
    g = path_graph(3)
    routes = [[0, 1], [1, 2]]
    fleet = fp.fleet_size(g, routes, [1, 1], 60)
    rep = ts.simulate(g, routes, [1, 1], fleet, DemandMatrix(3, {}), quiet_sim(horizon=4000), passengers=[(0, 0, 2)])
    assert rep.wait_s == [3480.0] and rep.move_s == [240.0]


def random_routes(graph, rng, k=3, max_len=5):
    routes = []
    for _ in range(k):
        r = [graph.transit_center]
        for _ in range(int(rng.integers(1, max_len))):
            c = [v for v in graph.adj[r[-1]] if v not in r]
            if not c:
                break
            r.append(int(rng.choice(c)))
        routes.append(r)
    return routes


def run(net, routes, seed, cfg=None, observer=None):
    _, freqs, fleet = fp.project(net.graph, routes, net.demand)
    cfg = cfg or ts.SimConfig(horizon=3600, rng_seed=seed)
    return ts.simulate(net.graph, routes, freqs, fleet, net.demand, cfg, observer=observer)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_conservation_capacity_determinism(seed):
    net = grid_city(3, 4, demand_pairs=30, total_rate=900, seed=seed)
    routes = random_routes(net.graph, np.random.default_rng(seed))
    cap = 5
    cfg = ts.SimConfig(horizon=3600, rng_seed=seed, bus_capacity=cap)
    prev = {"completed": 0, "spawned": 0}

    def check(t, s):
        assert s["spawned"] == s["completed"] + s["onboard"] + s["waiting"]
        assert 0 <= s["max_load"] <= cap
        assert s["completed"] >= prev["completed"] and s["spawned"] >= prev["spawned"]
        prev.update(s)

    a = run(net, routes, seed, cfg, check)
    b = run(net, routes, seed, cfg)
    assert a.to_json(per_passenger=True) == b.to_json(per_passenger=True)
    assert a.n_comp + a.n_ongoing + a.n_waiting <= a.n_want <= a.n_od
    m = ts.compute_metrics(a)
    assert 0 <= m.service_rate <= 100 and 0 <= m.transfer_rate <= 100
    assert m.wait_time >= 0 and m.journey_time >= m.wait_time


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_removing_a_route_never_raises_n_want(seed):
    net = grid_city(3, 4, demand_pairs=30, total_rate=900, seed=seed)
    routes = random_routes(net.graph, np.random.default_rng(seed))
    cfg = ts.SimConfig(horizon=3600, rng_seed=seed)
    full = run(net, routes, seed, cfg).n_want
    for k in range(len(routes)):
        assert run(net, routes[:k] + routes[k + 1:], seed, cfg).n_want <= full


def test_spawn_stream_rate():
    d = DemandMatrix(2, {(0, 1): 36.0})
    sched = ts.spawn_schedule(d, 3600, 1.0, 0, np.random.default_rng(0))
    assert len(sched) == 36
    assert [s for s, _, _ in sched[:3]] == [99, 199, 299]
