"""Deterministic mesoscopic bus/passenger simulator and evaluation metrics.

The simulator advances a fixed-step clock. Buses run both directions of every
route, dwell at every stop, and exchange passengers at dwell start. Passengers
arrive as a deterministic stream per OD pair and follow a minimum-hop itinerary
on the route graph, transferring between routes at shared stops.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fosproj import FleetPlan, Segment, route_adjacency, route_segments, segment
from .netmodel import DemandMatrix, RoadGraph
from .paths import BFSTree, bfs_tree, tree_edge_flows


class SimulationConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    horizon: int = 10_000
    dt: float = 1.0
    bus_capacity: int = 40
    dwell: float = 60.0
    access_radius: float = 500.0
    congestion_coefficient: float = 0.15
    congestion_exponent: float = 4.0
    reference_volume: float = 600.0  # cars/hour at which the slowdown equals the coefficient
    spawn_jitter: int = 1  # +/- steps
    delta_max: float = 1.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.horizon < 1 or self.dt <= 0:
            raise SimulationConfigError("horizon must be >= 1 and dt > 0")
        if self.bus_capacity < 1:
            raise SimulationConfigError("bus_capacity must be >= 1")
        if self.dwell < 0 or self.access_radius < 0:
            raise SimulationConfigError("dwell and access_radius must be nonnegative")
        if self.congestion_coefficient < 0 or self.reference_volume <= 0:
            raise SimulationConfigError("congestion parameters out of range")
        if self.spawn_jitter < 0:
            raise SimulationConfigError("spawn_jitter must be >= 0")
        if self.delta_max <= 0:
            raise SimulationConfigError("delta_max must be positive")


# --- route graph and itineraries -----------------------------------------------


@dataclass(frozen=True)
class Leg:
    route: int
    board: int
    alight: int
    direction: int  # +1 along the stored node order, -1 against it


@dataclass(frozen=True)
class Itinerary:
    legs: tuple[Leg, ...]

    @property
    def transfers(self) -> int:
        return len(self.legs) - 1


class RouteGraph:
    """Graph induced by a route set, with per-segment route membership."""

    def __init__(self, routes: Sequence[Sequence[int]]):
        self.routes = tuple(tuple(int(v) for v in r) for r in routes)
        self.adj = route_adjacency(self.routes)
        self.nodes = frozenset(self.adj)
        self.members: dict[Segment, list[int]] = {}
        for k, r in enumerate(self.routes):
            for s in dict.fromkeys(route_segments(r)):
                self.members.setdefault(s, []).append(k)
        self.position = [{v: i for i, v in enumerate(r)} for r in self.routes]
        self._trees: dict[int, BFSTree] = {}

    @property
    def segments(self) -> set[Segment]:
        return set(self.members)

    def tree(self, source: int) -> BFSTree:
        t = self._trees.get(source)
        if t is None:
            t = self._trees[source] = bfs_tree(self.adj, source)
        return t

    def routes_at(self, node: int) -> list[int]:
        return [k for k, pos in enumerate(self.position) if node in pos]


def build_route_graph(routes: Sequence[Sequence[int]]) -> RouteGraph:
    return RouteGraph(routes)


def decompose_legs(rg: RouteGraph, path: Sequence[int]) -> Itinerary:
    """Split a node path into maximal single-route legs, greedily."""
    legs = []
    i, m = 0, len(path) - 1
    while i < m:
        best = None
        for k in rg.members[segment(path[i], path[i + 1])]:
            pos = rg.position[k]
            step = pos[path[i + 1]] - pos[path[i]]
            j = i + 1
            while j < m and pos.get(path[j + 1], -10**9) - pos[path[j]] == step:
                j += 1
            if best is None or j > best[0]:
                best = (j, k, step)
        j, k, step = best
        legs.append(Leg(k, path[i], path[j], step))
        i = j
    return Itinerary(tuple(legs))


def plan_itinerary(rg: RouteGraph, origin: int, destination: int) -> Itinerary | None:
    if origin == destination or origin not in rg.nodes or destination not in rg.nodes:
        return None
    path = rg.tree(origin).path_to(destination)
    if path is None:
        return None
    return decompose_legs(rg, path)


class AccessMap:
    """Served stops reachable on foot from every road node."""

    def __init__(self, graph: RoadGraph, rg: RouteGraph, radius: float):
        served = sorted(rg.nodes)
        self.options: list[list[tuple[float, int]]] = []
        coords = graph.coords
        for i in range(graph.n):
            if not served:
                self.options.append([])
                continue
            d = np.hypot(*(coords[served] - coords[i]).T)
            opts = sorted((float(dist), s) for dist, s in zip(d, served) if dist <= radius + 1e-9)
            self.options.append(opts)

    def plan(self, rg: RouteGraph, o: int, d: int) -> Itinerary | None:
        """Best transit itinerary between road nodes ``o`` and ``d``.

        Among all (access stop, egress stop) pairs within walking radius that
        are distinct and connected, prefer the least total walking distance,
        then the fewest hops, then the smallest stop ids.
        """
        best = None
        for da, a in self.options[o]:
            tree = rg.tree(a)
            for db, b in self.options[d]:
                if a == b or not tree.reaches(b):
                    continue
                key = (da + db, tree.depth[b], a, b)
                if best is None or key < best:
                    best = key
        if best is None:
            return None
        _, _, a, b = best
        return decompose_legs(rg, rg.tree(a).path_to(b))


# --- simulation ------------------------------------------------------------------


@dataclass
class SimulationReport:
    n_want: int = 0
    n_comp: int = 0
    n_ongoing: int = 0
    n_waiting: int = 0
    n_transfer: int = 0
    n_od: int = 0
    served_wait_s: float = 0.0
    served_move_s: float = 0.0
    bus_occupancy: list[float] = field(default_factory=list)  # time-averaged per bus
    bus_capacity: int = 40
    frequencies: list[int] = field(default_factory=list)
    fleet: list[int] = field(default_factory=list)
    total_route_km: float = 0.0
    wait_s: list[float] = field(default_factory=list, repr=False)  # per served passenger
    move_s: list[float] = field(default_factory=list, repr=False)

    @property
    def n_boarded(self) -> int:
        return self.n_comp + self.n_ongoing

    @property
    def n_bus(self) -> int:
        return sum(self.fleet)

    def to_dict(self, per_passenger: bool = False) -> dict:
        d = asdict(self)
        if not per_passenger:
            d.pop("wait_s")
            d.pop("move_s")
        d["n_boarded"] = self.n_boarded
        d["n_bus"] = self.n_bus
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), sort_keys=True)


class _Passenger:
    __slots__ = ("legs", "leg", "since", "wait", "move", "state")

    def __init__(self, legs: tuple[Leg, ...], t: int):
        self.legs = legs
        self.leg = 0
        self.since = t
        self.wait = 0
        self.move = 0
        self.state = 0  # 0 waiting, 1 onboard, 2 done


class _Bus:
    __slots__ = ("route", "direction", "stop", "onboard", "occ_area", "last_t")

    def __init__(self, route: int):
        self.route = route
        self.direction = 1
        self.stop = 0
        self.onboard: list[_Passenger] = []
        self.occ_area = 0.0
        self.last_t = 0

    def mark(self, t: int):
        self.occ_area += len(self.onboard) * (t - self.last_t)
        self.last_t = t


def spawn_schedule(
    demand: DemandMatrix, horizon: int, dt: float, jitter: int, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """Deterministic arrival stream: ``(step, origin, destination)`` sorted by step.

    A per-pair accumulator grows by ``alpha * rate / 3600 * dt`` each step and
    emits a passenger whenever it crosses an integer, which happens at step
    ``ceil(k / per_step) - 1`` for the ``k``-th passenger.
    """
    out = []
    for (o, d) in sorted(demand.entries):
        if o == d:
            continue
        per_step = demand.transit(o, d) / 3600.0 * dt
        if per_step <= 0:
            continue
        count = int(math.floor(per_step * horizon + 1e-9))
        if count == 0:
            continue
        k = np.arange(1, count + 1)
        steps = np.ceil(k / per_step - 1e-9).astype(np.int64) - 1
        steps = steps[(steps >= 0) & (steps < horizon)]
        if jitter:
            steps = np.clip(steps + rng.integers(-jitter, jitter + 1, size=len(steps)), 0, horizon - 1)
        out.extend((int(s), o, d) for s in steps)
    out.sort()
    return out


def car_link_volumes(graph: RoadGraph, demand: DemandMatrix) -> dict[Segment, float]:
    """(1 - alpha) OD flow on road links, routed with the same min-hop rule."""
    share = 1.0 - demand.alpha
    flows: dict[Segment, float] = {}
    if share <= 0:
        return flows
    by_origin: dict[int, dict[int, float]] = {}
    for (o, d), r in demand.entries.items():
        if o != d and r > 0:
            by_origin.setdefault(o, {})
            by_origin[o][d] = by_origin[o].get(d, 0.0) + share * r
    for o in sorted(by_origin):
        for s, f in tree_edge_flows(bfs_tree(graph.adj, o), by_origin[o]).items():
            flows[s] = flows.get(s, 0.0) + f
    return flows


def link_steps(graph: RoadGraph, demand: DemandMatrix, cfg: SimConfig) -> dict[Segment, int]:
    volumes = car_link_volumes(graph, demand) if cfg.congestion_coefficient > 0 else {}
    out = {}
    for e in graph.edges:
        s = segment(e.u, e.v)
        slow = 1.0 + cfg.congestion_coefficient * (volumes.get(s, 0.0) / cfg.reference_volume) ** cfg.congestion_exponent
        seconds = e.length / (e.free_speed / slow)
        out[s] = max(1, math.ceil(seconds / cfg.dt - 1e-9))
    return out


Observer = Callable[[int, dict], None]


def simulate(
    graph: RoadGraph,
    routes: Sequence[Sequence[int]],
    freqs: Sequence[int],
    fleet: FleetPlan,
    demand: DemandMatrix,
    cfg: SimConfig | None = None,
    *,
    passengers: Sequence[tuple[int, int, int]] | None = None,
    observer: Observer | None = None,
) -> SimulationReport:
    """Run one deterministic simulation of a finished design.

    ``passengers`` replaces the demand-driven arrival stream with explicit
    ``(step, origin, destination)`` spawns. ``observer`` is called after every
    step with the passenger counters and the largest bus load.
    """
    cfg = cfg or SimConfig()
    cfg.validate()
    routes = [tuple(r) for r in routes]
    if not routes:
        raise SimulationConfigError("design has no routes")
    if len(freqs) != len(routes) or len(fleet.per_route) != len(routes):
        raise SimulationConfigError("frequencies and fleet must have one entry per route")
    if any(f < 1 for f in freqs):
        raise SimulationConfigError(f"every frequency must be >= 1, got {list(freqs)}")
    if any(b < 1 for b in fleet.per_route):
        raise SimulationConfigError("every route needs at least one bus")
    headways = [max(1, round(3600.0 / f / cfg.dt)) for f in freqs]
    if cfg.horizon < max(headways):
        raise SimulationConfigError(
            f"horizon of {cfg.horizon} steps is shorter than the longest headway ({max(headways)} steps)"
        )
    for r in routes:
        for a, b in zip(r[:-1], r[1:]):
            if not graph.has_edge(a, b):
                raise SimulationConfigError(f"route {list(r)} uses missing road link ({a},{b})")

    H = cfg.horizon
    cap = cfg.bus_capacity
    dwell = max(0, math.ceil(cfg.dwell / cfg.dt - 1e-9))
    rng = np.random.default_rng(cfg.rng_seed)
    rg = RouteGraph(routes)
    access = AccessMap(graph, rg, cfg.access_radius)
    travel = link_steps(graph, demand, cfg)

    if passengers is None:
        schedule = spawn_schedule(demand, H, cfg.dt, cfg.spawn_jitter, rng)
    else:
        schedule = sorted((int(t), int(o), int(d)) for t, o, d in passengers if 0 <= t < H)
    report = SimulationReport(
        n_od=len(schedule),
        bus_capacity=cap,
        frequencies=list(freqs),
        fleet=list(fleet.per_route),
        total_route_km=sum(graph.route_length(r) for r in routes) / 1000.0,
    )

    plans: dict[tuple[int, int], Itinerary | None] = {}
    queues: dict[tuple[int, int, int], deque] = {}  # (stop, route, direction)
    riders: list[_Passenger] = []

    # per route and direction: stop sequence and cumulative arrival offsets
    seqs: dict[tuple[int, int], tuple[int, ...]] = {}
    hops: dict[tuple[int, int], list[int]] = {}
    for k, r in enumerate(routes):
        for d, seq in ((1, r), (-1, r[::-1])):
            seqs[(k, d)] = seq
            hops[(k, d)] = [travel[segment(a, b)] for a, b in zip(seq[:-1], seq[1:])]

    buses: list[_Bus] = []
    idle: dict[tuple[int, int], list[_Bus]] = {}
    pending: dict[tuple[int, int], int] = {}
    for k, r in enumerate(routes):
        n = fleet.per_route[k]
        fleet_k = [_Bus(k) for _ in range(n)]
        buses.extend(fleet_k)
        if len(r) < 2:
            continue  # a one-stop route has nowhere to drive
        idle[(k, 1)] = fleet_k[: (n + 1) // 2]
        idle[(k, -1)] = fleet_k[(n + 1) // 2:]
        pending[(k, 1)] = pending[(k, -1)] = 0

    events: list[tuple[int, int, int, _Bus]] = []  # (time, seq, kind, bus)
    counter = 0
    KIND_ARRIVE, KIND_FREE = 0, 1

    n_wait = n_board = n_done = n_spawned = 0

    def start_trips(key, t):
        nonlocal counter
        pool = idle[key]
        while pending[key] and pool:
            bus = pool.pop(0)
            pending[key] -= 1
            bus.direction = key[1]
            bus.stop = 0
            heapq.heappush(events, (t, counter, KIND_ARRIVE, bus))
            counter += 1

    sp = 0
    for t in range(H):
        # arrivals of new passengers
        while sp < len(schedule) and schedule[sp][0] == t:
            _, o, d = schedule[sp]
            sp += 1
            key = (o, d)
            if key not in plans:
                plans[key] = access.plan(rg, o, d)
            plan = plans[key]
            if plan is None:
                continue
            p = _Passenger(plan.legs, t)
            riders.append(p)
            leg = plan.legs[0]
            queues.setdefault((leg.board, leg.route, leg.direction), deque()).append(p)
            n_wait += 1
            n_spawned += 1

        # scheduled departures
        for (k, d) in pending:
            if t % headways[k] == 0:
                pending[(k, d)] += 1
                start_trips((k, d), t)

        # bus events due now
        while events and events[0][0] <= t:
            _, _, kind, bus = heapq.heappop(events)
            key = (bus.route, bus.direction)
            if kind == KIND_FREE:
                back = (bus.route, -bus.direction)
                idle[back].append(bus)
                start_trips(back, t)
                continue
            seq = seqs[key]
            stop = seq[bus.stop]
            bus.mark(t)
            if bus.onboard:
                stay = []
                for p in bus.onboard:
                    leg = p.legs[p.leg]
                    if leg.alight != stop:
                        stay.append(p)
                        continue
                    p.move += t - p.since
                    p.since = t
                    n_board -= 1
                    if p.leg + 1 == len(p.legs):
                        p.state = 2
                        n_done += 1
                        report.n_comp += 1
                        if len(p.legs) > 1:
                            report.n_transfer += 1
                    else:
                        p.leg += 1
                        p.state = 0
                        nxt = p.legs[p.leg]
                        queues.setdefault((nxt.board, nxt.route, nxt.direction), deque()).append(p)
                        n_wait += 1
                bus.onboard = stay
            last = bus.stop == len(seq) - 1
            if not last:
                q = queues.get((stop, bus.route, bus.direction))
                while q and len(bus.onboard) < cap:
                    p = q.popleft()
                    p.wait += t - p.since
                    p.since = t
                    p.state = 1
                    bus.onboard.append(p)
                    n_wait -= 1
                    n_board += 1
                nxt_t = t + dwell + hops[key][bus.stop]
                bus.stop += 1
                heapq.heappush(events, (nxt_t, counter, KIND_ARRIVE, bus))
            else:
                heapq.heappush(events, (t + dwell, counter, KIND_FREE, bus))
            counter += 1

        if observer is not None:
            observer(t, {
                "spawned": n_spawned,
                "completed": n_done,
                "onboard": n_board,
                "waiting": n_wait,
                "max_load": max((len(b.onboard) for b in buses), default=0),
            })

    end = H
    for b in buses:
        b.mark(end)
    report.bus_occupancy = [b.occ_area / H for b in buses]
    report.n_want = n_spawned
    report.n_waiting = n_wait
    report.n_ongoing = n_board
    sec = cfg.dt
    for p in riders:
        if p.state == 1:
            p.move += end - p.since
            p.since = end
        if p.state in (1, 2):
            report.wait_s.append(p.wait * sec)
            report.move_s.append(p.move * sec)
    report.served_wait_s = float(sum(report.wait_s))
    report.served_move_s = float(sum(report.move_s))
    return report


# --- metrics -----------------------------------------------------------------------


@dataclass
class Metrics:
    service_rate: float
    wait_time: float
    transfer_rate: float
    journey_time: float
    route_efficiency: float
    fleet_size: int
    bus_utilization: float

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = (
    "service_rate",
    "wait_time",
    "transfer_rate",
    "journey_time",
    "route_efficiency",
    "fleet_size",
    "bus_utilization",
)


def mean_wait_min(report: SimulationReport) -> float:
    n = report.n_boarded
    return report.served_wait_s / n / 60.0 if n else 0.0


def mean_move_min(report: SimulationReport) -> float:
    n = report.n_boarded
    return report.served_move_s / n / 60.0 if n else 0.0


def utilization(report: SimulationReport) -> float:
    """Mean over buses of time-averaged occupancy divided by capacity, as a fraction."""
    occ = report.bus_occupancy
    return float(np.mean(occ)) / report.bus_capacity if occ else 0.0


def compute_metrics(report: SimulationReport) -> Metrics:
    served = report.n_boarded
    return Metrics(
        service_rate=100.0 * served / report.n_want if report.n_want else 0.0,
        wait_time=mean_wait_min(report),
        transfer_rate=100.0 * report.n_transfer / report.n_comp if report.n_comp else 0.0,
        journey_time=mean_wait_min(report) + mean_move_min(report),
        route_efficiency=report.n_comp / report.total_route_km if report.total_route_km > 0 else 0.0,
        fleet_size=report.n_bus,
        bus_utilization=100.0 * utilization(report),
    )


def overlap_ratio(routes: Sequence[Sequence[int]]) -> float:
    """Edge-count overlap: mean over used segments of (c_e - 1) / (K_eff - 1)."""
    per_route = [set(route_segments(r)) for r in routes]
    per_route = [s for s in per_route if s]
    k_eff = len(per_route)
    if k_eff <= 1:
        return 0.0
    counts: dict[Segment, int] = {}
    for segs in per_route:
        for s in segs:
            counts[s] = counts.get(s, 0) + 1
    return sum((c - 1) / (k_eff - 1) for c in counts.values()) / len(counts)
