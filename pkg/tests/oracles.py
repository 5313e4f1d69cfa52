"""Independent brute-force references used by several test modules."""

import itertools

import numpy as np


def simple_paths(adj, s, t):
    out, stack = [], [(s, [s])]
    while stack:
        u, p = stack.pop()
        if u == t:
            out.append(p)
            continue
        for v in adj.get(u, ()):
            if v not in p:
                stack.append((v, p + [v]))
    return out


def lexmin_shortest_path(adj, s, t):
    paths = simple_paths(adj, s, t)
    return min(paths, key=lambda p: (len(p), p)) if paths else None


def route_adj(routes):
    adj = {}
    for r in routes:
        for v in r:
            adj.setdefault(v, set())
        for a, b in zip(r, r[1:]):
            adj[a].add(b)
            adj[b].add(a)
    return adj


def brute_loads(routes, entries, alpha):
    """Per-route overlap-normalised segment loads from explicit path enumeration."""
    adj = route_adj(routes)
    flows = {}
    for (o, d), rate in entries.items():
        if o == d or o not in adj or d not in adj:
            continue
        p = lexmin_shortest_path(adj, o, d)
        if p is None:
            continue
        for a, b in zip(p, p[1:]):
            s = (min(a, b), max(a, b))
            flows[s] = flows.get(s, 0.0) + alpha * rate
    count = {}
    for r in routes:
        for s in {(min(a, b), max(a, b)) for a, b in zip(r, r[1:])}:
            count[s] = count.get(s, 0) + 1
    return [{(min(a, b), max(a, b)): flows.get((min(a, b), max(a, b)), 0.0) / count[(min(a, b), max(a, b))]
             for a, b in zip(r, r[1:])} for r in routes]


def enumerate_designs(graph, hub, K, L_max):
    """Every terminal route tuple reachable by the construction process, with forced finalisation."""
    def routes_from(cur):
        cands = [v for v in graph.adj[cur[-1]] if v not in cur]
        if len(cur) >= L_max or not cands:
            yield tuple(cur)
            return
        for v in cands:
            yield from routes_from(cur + [v])
    single = list(routes_from([hub]))
    return list(itertools.product(single, repeat=K))


# --- toy design instances ---------------------------------------------------------------

TOY_GRAPHS = {
    "path5": [(0, 1), (1, 2), (2, 3), (3, 4)],
    "star5": [(0, 1), (0, 2), (0, 3), (0, 4)],
    "cycle5": [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
    "kite": [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)],
    "house": [(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
    "k4": [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
    "diamond": [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)],
}


def toy_instance(name, hub, K, L_max, seed):
    """Graph, demand and a deterministic reward for one toy design problem."""
    from transitdesign.designenv import DesignEnv, EnvConfig, coverage_potential
    from transitdesign.netmodel import DemandMatrix
    from transitdesign.transitsim import overlap_ratio

    pairs = TOY_GRAPHS[name]
    n = 1 + max(max(p) for p in pairs)
    rng = np.random.default_rng(seed)
    angle = 2 * np.pi * np.arange(n) / n
    coords = [(1000 * np.cos(a), 1000 * np.sin(a)) for a in angle]
    lengths = rng.uniform(300, 1500, size=len(pairs))
    from transitdesign.netmodel import Edge, RoadGraph

    graph = RoadGraph(coords, [Edge(u, v, float(l), 10.0) for (u, v), l in zip(pairs, lengths)], hub)
    dense = rng.gamma(0.7, 10.0, size=(n, n)) * (rng.random((n, n)) < 0.6)
    np.fill_diagonal(dense, 0.0)
    demand = DemandMatrix.from_dense(dense)

    def reward(routes):
        km = sum(graph.route_length(r) for r in routes) / 1000.0
        covered = len({v for r in routes for v in r}) / n
        return 60 * coverage_potential(graph, demand, routes) + 15 * covered - 10 * overlap_ratio(routes) - 2 * km

    env = DesignEnv(graph, demand, EnvConfig(routes=K, max_len=L_max), reward_fn=reward)
    return env, reward


def first_action_values(env, reward):
    """Normalised best-completion value of every first action, and whether each is optimal."""
    from transitdesign.search import best_completion_value

    designs = enumerate_designs(env.graph, env.hub, env.cfg.routes, env.cfg.max_len)
    values = [reward(d) for d in designs]
    lo, hi = min(values), max(values)
    memo = {}
    s = env.reset()
    vals = {a: best_completion_value(env, env.apply(s, a)[0], reward, memo) for a in env.candidates(s)}
    span = hi - lo if hi > lo else 1.0
    return {a: (v - lo) / span for a, v in vals.items()}, (max(vals.values()) - lo) / span


def toy_margin(env, reward):
    """Gap between the optimal first action and the best non-optimal one (None when all are optimal)."""
    vals, best = first_action_values(env, reward)
    worse = [v for v in vals.values() if v < best - 1e-12]
    return None if not worse else best - max(worse)


def toy_cases():
    """Every candidate toy problem: graph family x hub x (K, L_max) with a fixed demand seed."""
    out = []
    for i, name in enumerate(sorted(TOY_GRAPHS)):
        n = 1 + max(max(p) for p in TOY_GRAPHS[name])
        for hub in range(n):
            for K, L in ((1, 3), (1, 4), (2, 3), (2, 4)):
                out.append((name, hub, K, L, 1000 * i + 100 * hub + 10 * K + L))
    return out


def toy_suite(margin=0.05):
    """Toy problems with a resolvable optimum, plus the near-tie problems that were set aside.

    A case is kept when some first action is not optimal and the best first
    action beats every non-optimal one by at least ``margin`` of the
    normalised reward range.
    """
    kept, near_ties = [], []
    for case in toy_cases():
        env, reward = toy_instance(*case)
        m = toy_margin(env, reward)
        if m is None:
            continue
        (kept if m >= margin else near_ties).append(case)
    return kept, near_ties
