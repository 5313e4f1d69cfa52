import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transitdesign.baselines import (
    GAConfig, crossover, ga_optimize, greedy_demand_design, heuristic_design, heuristic_probabilities,
    pure_mcts_design, regenerate, repair,
)
from transitdesign.citygen import geometric_city, grid_city
from transitdesign.designenv import DesignEnv, EnvConfig, validate_design
from transitdesign.netmodel import DemandMatrix, Edge, RoadGraph
from transitdesign.search import SearchConfig

from conftest import make_graph, quiet_sim
from oracles import enumerate_designs, toy_instance


def star_env(lengths=(100.0, 300.0), demand=None):
    g = RoadGraph([(0, 0), (1, 0), (0, 1)], [Edge(0, 1, lengths[0], 10.0), Edge(0, 2, lengths[1], 10.0)], 0)
    return DesignEnv(g, DemandMatrix(3, demand or {}), EnvConfig(routes=1, max_len=2), quiet_sim())


def city_env(routes=3, max_len=5, seed=0):
    net = grid_city(3, 4, seed=seed)
    return DesignEnv(net.graph, net.demand, EnvConfig(routes=routes, max_len=max_len), quiet_sim(horizon=4000))


# --- heuristics --------------------------------------------------------------------------------


def test_uniform_two_candidates():
    env = star_env()
    cands, p = heuristic_probabilities("random", env, env.initial_state())
    assert cands == [1, 2] and p.tolist() == [0.5, 0.5]


def test_demand_cover_proportional():
    env = star_env(demand={(0, 1): 1.0, (1, 0): 1.0, (0, 2): 2.0, (2, 0): 4.0})
    _, p = heuristic_probabilities("demand-cover", env, env.initial_state())
    assert np.allclose(p, [0.25, 0.75], atol=1e-12, rtol=0)


def test_demand_cover_uniform_fallback():
    env = star_env()
    _, p = heuristic_probabilities("demand-cover", env, env.initial_state())
    assert p.tolist() == [0.5, 0.5]


def test_shortest_path_inverse_length():
    env = star_env()
    _, p = heuristic_probabilities("shortest-path", env, env.initial_state())
    assert np.allclose(p, [0.75, 0.25], atol=1e-12, rtol=0)


def test_unknown_heuristic():
    env = star_env()
    with pytest.raises(ValueError, match="unknown heuristic"):
        heuristic_probabilities("greedy", env, env.initial_state())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["random", "demand-cover", "shortest-path"]))
def test_heuristic_distributions_match_formulas(seed, kind):
    net = geometric_city(10, 16, seed=seed % 50, demand_pairs=12)
    env = DesignEnv(net.graph, net.demand, EnvConfig(routes=2, max_len=5), quiet_sim())
    rng = np.random.default_rng(seed)
    state = env.settle(env.initial_state())[0]
    D = net.demand.dense()
    while not env.is_done(state):
        cands, p = heuristic_probabilities(kind, env, state)
        if kind == "random":
            ref = np.ones(len(cands))
        elif kind == "shortest-path":
            ref = np.array([1 / net.graph.edge(state.current[-1], c).length for c in cands])
        else:
            ref = np.array([sum(D[c, j] + D[j, c] for j in state.current) for c in cands])
            if ref.sum() == 0:
                ref = np.ones(len(cands))
        assert np.allclose(p, ref / ref.sum(), atol=1e-12, rtol=0)
        assert abs(p.sum() - 1) < 1e-12
        state = env.apply(state, cands[rng.integers(len(cands))])[0]


@pytest.mark.parametrize("kind", ["random", "demand-cover", "shortest-path"])
def test_heuristic_designs_valid(kind):
    env = city_env()
    for s in range(5):
        routes = heuristic_design(kind, env, np.random.default_rng(s))
        validate_design(env.graph, routes, hub=env.hub, max_len=5)
        assert len(routes) == 3


def test_greedy_demand_deterministic():
    env = city_env()
    assert greedy_demand_design(env) == greedy_demand_design(env)


# --- GA operators ----------------------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_regeneration_keeps_simple_hub_path(seed):
    net = geometric_city(12, 20, seed=seed % 30)
    g, rng = net.graph, np.random.default_rng(seed)
    from transitdesign.baselines import random_walk_route
    r = random_walk_route(g, g.transit_center, 6, 2, rng)
    for _ in range(5):
        r = repair(regenerate(r, g, 6, rng), g, g.transit_center, 6, 2, rng)
        validate_design(g, [r], hub=g.transit_center, max_len=6, min_len=2)


def test_regeneration_keeps_prefix_up_to_cut():
    g = make_graph([(i, 0) for i in range(6)], [(i, i + 1) for i in range(5)])
    r = (0, 1, 2, 3, 4)
    out = regenerate(r, g, 5, np.random.default_rng(0))
    assert out == r  # a path graph regrows the same way


def test_crossover_identical_parents():
    a = ((0, 1, 2), (0, 3))
    assert crossover(a, a, np.random.default_rng(0)) == a


def test_crossover_per_index_inheritance():
    a = ((0, 1), (0, 2), (0, 3), (0, 4))
    b = ((0, 5), (0, 6), (0, 7), (0, 8))
    child = crossover(a, b, np.random.default_rng(3))
    assert all(child[k] in (a[k], b[k]) for k in range(4))


def test_repair_rejects_isolated_hub():
    g = make_graph([(0, 0), (1, 0), (2, 0)], [(1, 2)])
    with pytest.raises(ValueError, match="no neighbour"):
        repair((0,), g, 0, 3, 2, np.random.default_rng(0))


def test_ga_config_validation():
    with pytest.raises(ValueError):
        GAConfig(elitism=50).validate()
    with pytest.raises(ValueError):
        GAConfig(min_len=1).validate()


def test_ga_invariants_small():
    env = city_env()
    res = ga_optimize(env, GAConfig(population=12, generations=5, elitism=2), seed=1, keep_populations=True)
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))
    for pop in res.populations:
        assert len(pop) == 12
        for ind in pop:
            validate_design(env.graph, ind, hub=env.hub, max_len=5, min_len=2)
    assert res.best_fitness == res.history[-1]


def test_ga_warm_start_enters_population():
    env = city_env()
    warm = greedy_demand_design(env)
    res = ga_optimize(env, GAConfig(population=6, generations=0, elitism=1), seed=0, warm_start=warm,
                      keep_populations=True)
    assert warm in res.populations[0]


def test_ga_seed_reproducible():
    env = city_env()
    a = ga_optimize(env, GAConfig(population=8, generations=3, elitism=1), seed=4)
    b = ga_optimize(env, GAConfig(population=8, generations=3, elitism=1), seed=4)
    assert a.best == b.best and a.history == b.history


# --- pure tree search ------------------------------------------------------------------------------------


def test_pure_mcts_counts_and_validity():
    env = city_env(routes=2, max_len=5)
    ep, ev = pure_mcts_design(env, SearchConfig(n_iter=20, add_noise=False), seed=0)
    validate_design(env.graph, ep.routes, hub=env.hub, max_len=5)
    assert ev.per_decision == [20] * len(ep.samples)
    assert ev.stats.count == ev.calls == 20 * len(ep.samples) + 1  # plus the first root expansion


def test_pure_mcts_finds_optimum_on_toy():
    env, reward = toy_instance("kite", 0, 2, 3, seed=0)
    best = max(reward(d) for d in enumerate_designs(env.graph, env.hub, 2, 3))
    hits = 0
    for s in range(5):
        ep, _ = pure_mcts_design(env, SearchConfig(n_iter=500, add_noise=False), seed=s)
        hits += abs(reward(ep.routes) - best) < 1e-9
    assert hits >= 4
