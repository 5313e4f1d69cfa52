"""Route-construction MDP: states, transitions, terminal and shaping rewards."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import fosproj
from .netmodel import DemandMatrix, RoadGraph, StateEncoder, StateEncoding, candidate_set
from .transitsim import (
    Metrics,
    SimConfig,
    SimulationReport,
    compute_metrics,
    mean_move_min,
    mean_wait_min,
    overlap_ratio,
    simulate,
    utilization,
)

REWARD_WEIGHTS = (60.0, 45.0, 20.0, 10.0, 10.0, 2.0, 12.0)
SHAPING_WEIGHTS = (20.0, 8.0)


class InvalidActionError(ValueError):
    def __init__(self, action, admissible):
        super().__init__(f"action {action!r} is not admissible; candidates are {list(admissible)}")
        self.action = action
        self.admissible = list(admissible)


@dataclass
class EnvConfig:
    routes: int = 16
    max_len: int = 14
    weights: tuple[float, ...] = REWARD_WEIGHTS
    shaping_weights: tuple[float, float] = SHAPING_WEIGHTS
    alpha: float | None = None  # overrides the demand matrix split when set
    wait_cap_min: float = 30.0
    move_cap_min: float = 40.0

    def validate(self) -> None:
        if self.routes < 1:
            raise ValueError("routes must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if len(self.weights) != 7 or len(self.shaping_weights) != 2:
            raise ValueError("expected 7 reward weights and 2 shaping weights")
        if any(w < 0 for w in (*self.weights, *self.shaping_weights)):
            raise ValueError("reward weights must be nonnegative")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class DesignState:
    completed: tuple[tuple[int, ...], ...]
    current: tuple[int, ...]

    @property
    def routes(self) -> tuple[tuple[int, ...], ...]:
        """Completed routes followed by the route under construction, if any."""
        return self.completed + ((self.current,) if self.current else ())


@dataclass
class StepOutcome:
    state: DesignState
    route_finalized: bool
    episode_done: bool
    forced: int = 0
    shaping_reward: float | None = None
    terminal_reward: float | None = None
    evaluation: "Evaluation | None" = None


@dataclass
class RewardTerms:
    psi: float
    rho: float
    wait_min: float
    move_min: float
    omega: float
    n_bus: int
    routes: int
    util: float


@dataclass
class Evaluation:
    reward: float
    terms: RewardTerms | None
    report: SimulationReport | None
    metrics: Metrics | None
    frequencies: list[int] = field(default_factory=list)
    fleet: list[int] = field(default_factory=list)


def coverage_potential(graph: RoadGraph, demand: DemandMatrix, routes: Sequence[Sequence[int]], alpha=None) -> float:
    """Share of total OD demand that is transit-assigned and connected by the routes."""
    a = demand.alpha if alpha is None else alpha
    total = demand.total()
    if total <= 0:
        return 0.0
    comp = _components(routes)
    served = sum(
        r for (o, d), r in demand.entries.items()
        if o != d and o in comp and d in comp and comp[o] == comp[d]
    )
    return a * served / total


def _components(routes) -> dict[int, int]:
    parent: dict[int, int] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for r in routes:
        for v in r:
            parent.setdefault(v, v)
        for a, b in zip(r[:-1], r[1:]):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    return {v: find(v) for v in parent}


def reward_terms(report: SimulationReport, routes, graph, demand, n_routes: int, alpha=None) -> RewardTerms:
    return RewardTerms(
        psi=coverage_potential(graph, demand, routes, alpha),
        rho=report.n_boarded / report.n_od if report.n_od else 0.0,
        wait_min=mean_wait_min(report),
        move_min=mean_move_min(report),
        omega=overlap_ratio(routes),
        n_bus=report.n_bus,
        routes=n_routes,
        util=utilization(report),
    )


def terminal_reward(terms: RewardTerms, cfg: EnvConfig | None = None) -> float:
    b = (cfg or EnvConfig()).weights
    wait_cap = cfg.wait_cap_min if cfg else 30.0
    move_cap = cfg.move_cap_min if cfg else 40.0
    return (
        b[0] * terms.psi
        + b[1] * terms.rho
        - b[2] * min(terms.wait_min / wait_cap, 1.0)
        - b[3] * min(terms.move_min / move_cap, 1.0)
        - b[4] * terms.omega
        - b[5] * terms.n_bus / terms.routes
        + b[6] * terms.util
    )


def shaping_reward(prev_psi: float, new_psi: float, omega: float, cfg: EnvConfig | None = None) -> float:
    b7, b8 = (cfg or EnvConfig()).shaping_weights
    return b7 * max(0.0, new_psi - prev_psi) - b8 * omega


class DesignEnv:
    """Sequential route construction on one network.

    States are immutable ``DesignState`` values, so search code can branch
    freely with ``apply``. ``step`` is the executed transition: it also runs
    the evaluation pipeline once when the last route is finalised.

    ``reward_fn`` replaces the simulator-based terminal reward with a direct
    function of the route tuple (used by toy problems and tests).
    """

    def __init__(
        self,
        graph: RoadGraph,
        demand: DemandMatrix,
        cfg: EnvConfig | None = None,
        sim_cfg: SimConfig | None = None,
        reward_fn: Callable[[tuple[tuple[int, ...], ...]], float] | None = None,
    ):
        self.cfg = cfg or EnvConfig()
        self.cfg.validate()
        if self.cfg.alpha is not None:
            demand = demand.with_alpha(self.cfg.alpha)
        self.graph = graph
        self.demand = demand
        self.sim_cfg = sim_cfg or SimConfig()
        self.reward_fn = reward_fn
        self.encoder = StateEncoder(graph, demand)
        self.sim_calls = 0
        self._encode = lru_cache(maxsize=4096)(self._encode_uncached)

    @property
    def hub(self) -> int:
        return self.graph.transit_center

    @property
    def max_decisions(self) -> int:
        return self.cfg.routes * (self.cfg.max_len - 1)

    # --- transitions ------------------------------------------------------------

    def initial_state(self) -> DesignState:
        return DesignState((), (self.hub,))

    def reset(self) -> DesignState:
        state, _ = self.settle(self.initial_state())
        return state

    def is_done(self, state: DesignState) -> bool:
        return len(state.completed) >= self.cfg.routes

    def candidates(self, state: DesignState) -> list[int]:
        if self.is_done(state):
            return []
        return candidate_set(self.graph, state.current)

    def mask(self, state: DesignState) -> np.ndarray:
        m = np.zeros(self.graph.n, dtype=bool)
        m[self.candidates(state)] = True
        return m

    def _finalize(self, state: DesignState) -> DesignState:
        completed = state.completed + (state.current,)
        current = (self.hub,) if len(completed) < self.cfg.routes else ()
        return DesignState(completed, current)

    def settle(self, state: DesignState) -> tuple[DesignState, int]:
        """Apply forced finalisations until a decision is possible or the design is done."""
        forced = 0
        while not self.is_done(state) and not candidate_set(self.graph, state.current):
            state = self._finalize(state)
            forced += 1
        return state, forced

    def apply(self, state: DesignState, action: int) -> tuple[DesignState, bool, int]:
        """Pure transition: ``(next_state, route_finalized, forced_finalizations)``."""
        cands = self.candidates(state)
        if action not in cands:
            raise InvalidActionError(action, cands)
        nxt = DesignState(state.completed, state.current + (int(action),))
        finalized = False
        if len(nxt.current) >= self.cfg.max_len:
            nxt = self._finalize(nxt)
            finalized = True
        nxt, forced = self.settle(nxt)
        return nxt, finalized or forced > 0, forced

    def step(self, state: DesignState, action: int, *, shaping: bool = False, seed: int | None = None) -> StepOutcome:
        nxt, finalized, forced = self.apply(state, action)
        out = StepOutcome(nxt, finalized, self.is_done(nxt), forced)
        if shaping:
            out.shaping_reward = shaping_reward(
                self.coverage(state.routes), self.coverage(nxt.routes), overlap_ratio(nxt.routes), self.cfg
            )
        if out.episode_done:
            out.evaluation = self.evaluate(nxt.completed, seed=seed)
            out.terminal_reward = out.evaluation.reward
        return out

    # --- evaluation -----------------------------------------------------------

    def coverage(self, routes) -> float:
        return coverage_potential(self.graph, self.demand, routes)

    def evaluate(self, routes: Sequence[Sequence[int]], seed: int | None = None) -> Evaluation:
        """Frequencies, fleet, one simulation and the terminal reward of a route set.

        Routes are simulated in a canonical (sorted) order so the result does
        not depend on how the tuple is permuted.
        """
        routes = tuple(tuple(int(v) for v in r) for r in routes)
        if self.reward_fn is not None:
            self.sim_calls += 1
            return Evaluation(float(self.reward_fn(routes)), None, None, None)
        order = sorted(range(len(routes)), key=lambda k: routes[k])
        canon = [routes[k] for k in order]
        sim_cfg = self.sim_cfg
        if seed is not None:
            sim_cfg = SimConfig(**{**sim_cfg.__dict__, "rng_seed": seed})
        _, freqs, fleet = fosproj.project(
            self.graph, canon, self.demand, sim_cfg.bus_capacity, sim_cfg.delta_max, sim_cfg.dwell
        )
        report = simulate(self.graph, canon, freqs, fleet, self.demand, sim_cfg)
        self.sim_calls += 1
        terms = reward_terms(report, canon, self.graph, self.demand, self.cfg.routes)
        inv = [0] * len(order)
        for pos, k in enumerate(order):
            inv[k] = pos
        return Evaluation(
            terminal_reward(terms, self.cfg),
            terms,
            report,
            compute_metrics(report),
            [freqs[inv[k]] for k in range(len(routes))],
            [fleet.per_route[inv[k]] for k in range(len(routes))],
        )

    # --- observation ----------------------------------------------------------

    def _encode_uncached(self, state: DesignState) -> StateEncoding:
        return self.encoder.encode(state.completed, state.current)

    def encode(self, state: DesignState) -> StateEncoding:
        return self._encode(state)


def validate_design(graph: RoadGraph, routes, hub: int | None = None, max_len: int | None = None, min_len: int = 1) -> None:
    """Raise ``ValueError`` unless every route is a simple path on the graph."""
    for k, r in enumerate(routes):
        r = list(r)
        if len(r) < min_len:
            raise ValueError(f"route {k} has {len(r)} nodes, fewer than {min_len}")
        if max_len is not None and len(r) > max_len:
            raise ValueError(f"route {k} has {len(r)} nodes, more than {max_len}")
        if len(set(r)) != len(r):
            raise ValueError(f"route {k} repeats a node: {r}")
        if hub is not None and r[0] != hub:
            raise ValueError(f"route {k} does not start at the hub {hub}: {r}")
        for a, b in zip(r[:-1], r[1:]):
            if not graph.has_edge(a, b):
                raise ValueError(f"route {k} uses missing link ({a},{b})")


def random_completion(env: DesignEnv, state: DesignState, rng: np.random.Generator) -> DesignState:
    """Finish a design with uniformly random admissible actions."""
    while not env.is_done(state):
        cands = env.candidates(state)
        state, _, _ = env.apply(state, cands[rng.integers(len(cands))])
    return state
