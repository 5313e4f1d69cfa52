"""Comparison designers: random-walk and greedy heuristics, a genetic algorithm, and rollout-based tree search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .designenv import DesignEnv, DesignState, validate_design
from .learner import Episode, RewardStats, normalize_value, run_design_episode
from .netmodel import candidate_set
from .search import RolloutEvaluator, SearchConfig

HEURISTICS = ("random", "demand-cover", "shortest-path")

Routes = tuple[tuple[int, ...], ...]


# --- constructive heuristics ------------------------------------------------------------------


def heuristic_probabilities(kind: str, env: DesignEnv, state: DesignState) -> tuple[list[int], np.ndarray]:
    """Candidate list and the sampling distribution the heuristic puts on it."""
    cands = env.candidates(state)
    if not cands:
        raise ValueError("no admissible action in this state")
    if kind == "random":
        w = np.ones(len(cands))
    elif kind == "demand-cover":
        # demand exchanged between each candidate and the nodes already on the route
        D = env.demand.dense()
        route = list(state.current)
        w = np.array([D[i, route].sum() + D[route, i].sum() for i in cands])
        if w.sum() <= 0:
            w = np.ones(len(cands))
    elif kind == "shortest-path":
        f = state.current[-1]
        w = np.array([1.0 / env.graph.edge(f, i).length for i in cands])
    else:
        raise ValueError(f"unknown heuristic {kind!r}; expected one of {HEURISTICS}")
    return cands, w / w.sum()


def heuristic_action(kind: str, env: DesignEnv, state: DesignState, rng: np.random.Generator) -> int:
    cands, p = heuristic_probabilities(kind, env, state)
    return int(cands[rng.choice(len(cands), p=p)])


def heuristic_design(kind: str, env: DesignEnv, rng: np.random.Generator) -> Routes:
    state, _ = env.settle(env.initial_state())
    while not env.is_done(state):
        state, _, _ = env.apply(state, heuristic_action(kind, env, state, rng))
    return state.completed


def greedy_demand_design(env: DesignEnv) -> Routes:
    """Always take the candidate with the highest demand-cover score (smallest id on ties)."""
    state, _ = env.settle(env.initial_state())
    while not env.is_done(state):
        cands, p = heuristic_probabilities("demand-cover", env, state)
        state, _, _ = env.apply(state, cands[int(np.argmax(p))])
    return state.completed


# --- genetic algorithm ---------------------------------------------------------------------------------


@dataclass
class GAConfig:
    population: int = 50
    generations: int = 100
    crossover_rate: float = 0.8
    mutation_rate: float = 0.4
    elitism: int = 5
    tournament: int = 3
    min_len: int = 2

    def validate(self) -> None:
        if self.population < 2 or self.generations < 0:
            raise ValueError("population must be >= 2 and generations >= 0")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be smaller than the population")
        if not 1 <= self.tournament <= self.population:
            raise ValueError("tournament size must lie in [1, population]")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("rates must lie in [0, 1]")
        if self.min_len < 2:
            raise ValueError("min_len must be >= 2")


@dataclass
class GAResult:
    best: Routes
    best_fitness: float
    history: list[float]
    populations: list[list[Routes]] = field(default_factory=list)


def _walk(graph, prefix: Sequence[int], max_len: int, rng: np.random.Generator, target: int | None = None) -> tuple:
    route = list(prefix)
    stop = min(max_len, target) if target else max_len
    while len(route) < stop:
        cands = candidate_set(graph, route)
        if not cands:
            break
        route.append(cands[rng.integers(len(cands))])
    return tuple(route)


def random_walk_route(graph, hub: int, max_len: int, min_len: int, rng) -> tuple:
    return _walk(graph, [hub], max_len, rng, target=int(rng.integers(min_len, max_len + 1)))


def regenerate(route: Sequence[int], graph, max_len: int, rng: np.random.Generator) -> tuple:
    """Cut at a random interior node and regrow by a masked random walk (one attempt)."""
    cut = int(rng.integers(1, len(route) - 1)) if len(route) > 2 else 0
    return _walk(graph, route[:cut + 1], max_len, rng)


def repair(route: Sequence[int], graph, hub: int, max_len: int, min_len: int, rng) -> tuple:
    route = tuple(route)
    if len(route) >= min_len:
        return route
    grown = _walk(graph, route or (hub,), max_len, rng)
    if len(grown) < min_len:
        raise ValueError(f"the hub {hub} has no neighbour; no route of {min_len} nodes exists")
    return grown


def crossover(a: Routes, b: Routes, rng: np.random.Generator) -> Routes:
    """Each route index comes from either parent with equal probability."""
    pick = rng.random(len(a)) < 0.5
    return tuple(a[k] if pick[k] else b[k] for k in range(len(a)))


def ga_optimize(env: DesignEnv, cfg: GAConfig | None = None, seed: int = 0, warm_start: Routes | None = None,
                sim_seed: int = 0, keep_populations: bool = False) -> GAResult:
    """Evolve complete route sets; fitness is the terminal reward from one simulation at a fixed seed."""
    cfg = cfg or GAConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    g, hub, K, L = env.graph, env.hub, env.cfg.routes, env.cfg.max_len
    cache: dict[Routes, float] = {}

    def fitness(ind: Routes) -> float:
        if ind not in cache:
            cache[ind] = env.evaluate(ind, seed=sim_seed).reward
        return cache[ind]

    def fix(ind) -> Routes:
        return tuple(repair(r, g, hub, L, cfg.min_len, rng) for r in ind)

    pop: list[Routes] = [fix(greedy_demand_design(env))]
    if warm_start is not None:
        try:
            validate_design(g, warm_start, hub=hub, max_len=L, min_len=cfg.min_len)
            if len(warm_start) == K:
                pop.append(tuple(tuple(r) for r in warm_start))
        except ValueError:
            pass  # real routes that don't fit the hub-anchored format are skipped
    while len(pop) < cfg.population:
        pop.append(tuple(random_walk_route(g, hub, L, cfg.min_len, rng) for _ in range(K)))

    history, snapshots = [], []
    for gen in range(cfg.generations + 1):
        scores = np.array([fitness(p) for p in pop])
        order = np.argsort(-scores, kind="stable")
        history.append(float(scores[order[0]]))
        if keep_populations:
            snapshots.append(list(pop))
        if gen == cfg.generations:
            break
        nxt = [pop[i] for i in order[:cfg.elitism]]

        def select() -> Routes:
            idx = rng.choice(len(pop), size=cfg.tournament, replace=False)
            return pop[int(idx[np.argmax(scores[idx])])]

        while len(nxt) < cfg.population:
            a, b = select(), select()
            child = crossover(a, b, rng) if rng.random() < cfg.crossover_rate else a
            if rng.random() < cfg.mutation_rate:
                k = int(rng.integers(K))
                child = child[:k] + (regenerate(child[k], g, L, rng),) + child[k + 1:]
            nxt.append(fix(child))
        pop = nxt

    scores = np.array([fitness(p) for p in pop])
    best = pop[int(np.argmax(scores))]
    return GAResult(best, float(scores.max()), history, snapshots)


# --- pure tree search ---------------------------------------------------------------------------------------


class CountingRollout(RolloutEvaluator):
    """Rollout evaluator on the shared normalised reward scale, with per-decision evaluation counts."""

    def __init__(self, rng: np.random.Generator, stats: RewardStats | None = None):
        self.stats = stats or RewardStats()
        super().__init__(rng, self._normalize)
        self.per_decision: list[int] = []

    def _normalize(self, z: float) -> float:
        self.stats.update(z)
        return normalize_value(z, self.stats)

    def __call__(self, env, state):
        if self.per_decision:
            self.per_decision[-1] += 1
        return super().__call__(env, state)

    def mark_decision(self, state) -> None:
        self.per_decision.append(0)


def pure_mcts_design(env: DesignEnv, cfg: SearchConfig | None = None, seed: int = 0, tau: float = 0.1,
                     stats: RewardStats | None = None) -> tuple[Episode, CountingRollout]:
    """Search with uniform priors and random-completion values; the tree survives route boundaries."""
    cfg = cfg or SearchConfig(add_noise=False)
    rng = np.random.default_rng(seed)
    ev = CountingRollout(np.random.default_rng([seed, 1]), stats)
    ep = run_design_episode(env, ev, cfg, tau, rng, int(rng.integers(2**31)),
                            fresh_tree_on_forced=False, on_decision=ev.mark_decision)
    return ep, ev
