import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_designs, toy_instance, toy_suite
from transitdesign import search as sr
from transitdesign.citygen import grid_city
from transitdesign.designenv import DesignEnv, EnvConfig
from transitdesign.policy import NetConfig, PolicyValueNet

TINY = NetConfig(embed=8, widths=(8, 8, 4, 4), heads=(2, 2, 1, 1), actor_hidden=(8,), critic_hidden=(8,))


def node_with(priors, N=None, W=None):
    n = sr.SearchNode(None)
    n.actions = np.arange(len(priors))
    n.P = n.P_raw = np.asarray(priors, float)
    n.N = np.zeros(len(priors), int) if N is None else np.asarray(N)
    n.W = np.zeros(len(priors)) if W is None else np.asarray(W, float)
    n.expanded = True
    return n


def test_puct_examples():
    node = node_with([0.8, 0.2])
    assert sr.puct_select(node, 1.0) == 0
    sr.backpropagate([(node, 0)], 0.0)
    scores = node.Q + node.P * math.sqrt(1 + node.N.sum()) / (1 + node.N)
    assert scores == pytest.approx([0.8 * math.sqrt(2) / 2, 0.2 * math.sqrt(2)], abs=1e-12)
    assert sr.puct_select(node, 1.0) == 0
    # a1 carries Q = 1; once a0's bonus falls below 1 the search switches
    node = node_with([0.8, 0.2], N=[1, 1], W=[0.0, 1.0])
    picks = []
    for _ in range(5):
        i = sr.puct_select(node, 1.0)
        picks.append(i)
        sr.backpropagate([(node, i)], 0.0 if i == 0 else 1.0)
    assert picks[-1] == 1


def test_puct_tie_goes_to_smallest_id():
    assert sr.puct_select(node_with([0.25, 0.25, 0.25, 0.25]), 1.5) == 0


def test_backup_running_mean():
    node = node_with([1.0])
    sr.backpropagate([(node, 0)], 0.5)
    assert (node.N[0], node.W[0], node.Q[0]) == (1, 0.5, 0.5)
    sr.backpropagate([(node, 0)], 1.0)
    sr.backpropagate([(node, 0)], 0.0)
    assert node.Q[0] == pytest.approx(0.5)
    assert node_with([0.5, 0.5]).Q.tolist() == [0.0, 0.0]


def test_root_noise():
    rng = np.random.default_rng(0)
    p = np.array([0.7, 0.2, 0.1])
    assert sr.apply_root_noise(p, 0.3, 0.0, rng).tolist() == p.tolist()
    rng1, rng2 = np.random.default_rng(5), np.random.default_rng(5)
    assert sr.apply_root_noise(p, 0.3, 1.0, rng1) == pytest.approx(rng2.dirichlet([0.3] * 3))
    for _ in range(500):
        k = int(rng.integers(1, 12))
        q = rng.dirichlet(np.ones(k))
        assert abs(sr.apply_root_noise(q, 0.3, 0.25, rng).sum() - 1) < 1e-12


def test_root_policy_examples():
    assert sr.root_policy([3, 1], 1.0) == pytest.approx([0.75, 0.25])
    assert sr.root_policy([3, 1], 0.5) == pytest.approx([0.9, 0.1])
    pi = sr.root_policy([3, 1], 0.1)
    assert pi[1] == pytest.approx(1 / (3**10 + 1)) and pi[0] == pytest.approx(0.99998, abs=1e-5)
    assert sr.root_policy([0, 5, 0], 0.1).tolist() == [0.0, 1.0, 0.0]


def small_env():
    net = grid_city(3, 3, demand_pairs=20, seed=1)
    return DesignEnv(net.graph, net.demand, EnvConfig(routes=2, max_len=3), reward_fn=lambda r: float(len(set(sum(r, ())))))


def test_uniform_evaluator_and_neural_priors():
    env = small_env()
    s = env.reset()
    priors, _ = sr.OracleEvaluator(lambda e, st: 0.0)(env, s)
    assert priors.tolist() == [0.25] * 4
    ev = sr.NeuralEvaluator(PolicyValueNet(TINY))
    p, v = ev(env, s)
    assert len(p) == 4 and abs(p.sum() - 1) < 1e-12 and np.isfinite(v)


def test_terminal_node_has_value_and_no_children():
    env = small_env()
    s = env.reset()
    while not env.is_done(s):
        s, _, _ = env.apply(s, env.candidates(s)[0])
    ev = sr.NeuralEvaluator(PolicyValueNet(TINY))
    node = sr.SearchNode(s)
    v = sr.expand_evaluate(node, env, ev)
    assert node.terminal and node.children == {} and v == ev(env, s)[1]


def test_evaluator_failure_names_the_state():
    env = small_env()

    def broken(e, s):
        raise KeyError("boom")

    with pytest.raises(RuntimeError, match="state"):
        sr.run_search(sr.SearchNode(env.reset()), env, broken, sr.SearchConfig(n_iter=2))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), n_iter=st.integers(1, 60))
def test_visit_total_and_policy_support(seed, n_iter):
    env = small_env()
    root = sr.SearchNode(env.reset())
    sr.run_search(root, env, sr.NeuralEvaluator(PolicyValueNet(TINY, seed=seed)), sr.SearchConfig(n_iter=n_iter),
                  np.random.default_rng(seed))
    assert root.visits == n_iter
    pi = sr.root_policy(root.N, 1.0)
    assert abs(pi.sum() - 1) < 1e-12 and len(pi) == len(env.candidates(root.state))


def test_search_deterministic_with_seed():
    env = small_env()
    net = PolicyValueNet(TINY, seed=2)
    runs = []
    for _ in range(2):
        root = sr.SearchNode(env.reset())
        sr.run_search(root, env, sr.NeuralEvaluator(net), sr.SearchConfig(n_iter=40), np.random.default_rng(11))
        runs.append((root.N.tolist(), root.W.tolist(), root.P.tolist()))
    assert runs[0] == runs[1]


def test_reroot_keeps_subtree_and_handles_forced():
    env = small_env()
    root = sr.SearchNode(env.reset())
    sr.run_search(root, env, sr.OracleEvaluator(lambda e, s: 0.5), sr.SearchConfig(n_iter=30, add_noise=False))
    a = int(root.actions[np.argmax(root.N)])
    child = root.children[a]
    before = child.N.copy()
    nxt, _, forced = env.apply(root.state, a)
    new = sr.reroot(root, a, nxt)
    assert new is child and new.N.tolist() == before.tolist()
    unvisited = [int(x) for x, n in zip(root.actions, root.N) if n == 0]
    if unvisited:
        s2, _, _ = env.apply(root.state, unvisited[0])
        assert sr.reroot(root, unvisited[0], s2).visits == 0
    fresh = sr.reroot(root, a, nxt, forced=True)
    assert fresh is not child and not fresh.expanded


def oracle_for(env, reward):
    designs = enumerate_designs(env.graph, env.hub, env.cfg.routes, env.cfg.max_len)
    values = [reward(d) for d in designs]
    lo, hi = min(values), max(values)
    memo = {}

    def value(e, s):
        v = sr.best_completion_value(e, s, reward, memo)
        return (v - lo) / (hi - lo) if hi > lo else 0.0

    return value, max(values)


def test_enumeration_agrees_with_recursive_best():
    env, reward = toy_instance("house", 0, 2, 3, seed=1)
    _, best = oracle_for(env, reward)
    assert sr.best_completion_value(env, env.reset(), reward, {}) == pytest.approx(best)


def optimal_first_actions(env, reward, best):
    s = env.reset()
    return {a for a in env.candidates(s) if sr.best_completion_value(env, env.apply(s, a)[0], reward, {}) >= best - 1e-9}


@pytest.mark.parametrize("case", toy_suite()[0][::6])
def test_oracle_guided_search_picks_optimal_first_action(case):
    name, hub, K, L, seed = case
    env, reward = toy_instance(name, hub, K, L, seed)
    value, best = oracle_for(env, reward)
    good = optimal_first_actions(env, reward, best)
    root = sr.SearchNode(env.reset())
    sr.run_search(root, env, sr.OracleEvaluator(value), sr.SearchConfig(n_iter=200), np.random.default_rng(seed))
    assert int(root.actions[np.argmax(root.N)]) in good
