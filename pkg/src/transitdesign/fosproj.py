"""Pre-simulation load assignment, max-load frequencies and fleet sizing."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

from .netmodel import DemandMatrix, RoadGraph
from .paths import bfs_tree, tree_edge_flows

Segment = tuple[int, int]


def segment(u: int, v: int) -> Segment:
    return (u, v) if u < v else (v, u)


def route_segments(route: Sequence[int]) -> list[Segment]:
    return [segment(a, b) for a, b in zip(route[:-1], route[1:])]


def route_adjacency(routes: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    """Undirected, unweighted adjacency of the graph induced by ``routes``."""
    adj: dict[int, set[int]] = {}
    for r in routes:
        for v in r:
            adj.setdefault(v, set())
        for a, b in zip(r[:-1], r[1:]):
            adj[a].add(b)
            adj[b].add(a)
    return {v: sorted(nb) for v, nb in adj.items()}


def segment_route_counts(routes: Sequence[Sequence[int]]) -> dict[Segment, int]:
    counts: dict[Segment, int] = {}
    for r in routes:
        for s in set(route_segments(r)):
            counts[s] = counts.get(s, 0) + 1
    return counts


@dataclass
class SegmentLoads:
    """Overlap-normalised passengers/hour per route and segment."""

    per_route: list[dict[Segment, float]]

    def route_max(self, k: int) -> float:
        return max(self.per_route[k].values(), default=0.0)


def raw_segment_flows(routes, demand: DemandMatrix, alpha: float | None = None) -> dict[Segment, float]:
    """Transit OD flow accumulated on route-graph segments before overlap division."""
    a = demand.alpha if alpha is None else alpha
    adj = route_adjacency(routes)
    by_origin: dict[int, dict[int, float]] = {}
    for (o, d), r in demand.entries.items():
        if o != d and r > 0 and o in adj and d in adj:
            by_origin.setdefault(o, {})[d] = by_origin.get(o, {}).get(d, 0.0) + a * r
    flows: dict[Segment, float] = {}
    for o in sorted(by_origin):
        tree = bfs_tree(adj, o)
        for s, f in tree_edge_flows(tree, by_origin[o]).items():
            flows[s] = flows.get(s, 0.0) + f
    return flows


def assign_segment_loads(
    graph: RoadGraph, routes: Sequence[Sequence[int]], demand: DemandMatrix, alpha: float | None = None
) -> SegmentLoads:
    flows = raw_segment_flows(routes, demand, alpha)
    counts = segment_route_counts(routes)
    per_route = []
    for r in routes:
        per_route.append({s: flows.get(s, 0.0) / counts[s] for s in route_segments(r)})
    return SegmentLoads(per_route)


def max_load_frequencies(loads: SegmentLoads, capacity: float, delta_max: float = 1.0) -> list[int]:
    if capacity <= 0 or delta_max <= 0:
        raise ValueError("capacity and delta_max must be positive")
    return [
        max(1, math.ceil(loads.route_max(k) / (delta_max * capacity)))
        for k in range(len(loads.per_route))
    ]


def is_capacity_feasible(loads: SegmentLoads, freqs: Sequence[int], capacity: float, delta_max: float) -> bool:
    return all(
        f >= 1 and all(q <= delta_max * capacity * f for q in route_loads.values())
        for route_loads, f in zip(loads.per_route, freqs)
    )


def verify_minimality(loads: SegmentLoads, capacity: float, delta_max: float, bound: int = 6) -> bool:
    """Brute-force check that the projection is below every feasible vector in ``{1..bound}^K``."""
    proj = max_load_frequencies(loads, capacity, delta_max)
    K = len(loads.per_route)
    for cand in itertools.product(range(1, bound + 1), repeat=K):
        if is_capacity_feasible(loads, cand, capacity, delta_max):
            if any(p > c for p, c in zip(proj, cand)):
                return False
    # the projection itself must be feasible, and one less in any component must not be
    if not is_capacity_feasible(loads, proj, capacity, delta_max):
        return False
    for k in range(K):
        if proj[k] > 1:
            lower = list(proj)
            lower[k] -= 1
            if is_capacity_feasible(loads, lower, capacity, delta_max):
                return False
    return True


@dataclass
class FleetPlan:
    per_route: list[int]
    round_trip_s: list[float]

    @property
    def total(self) -> int:
        return sum(self.per_route)


def fleet_size(graph: RoadGraph, routes, freqs: Sequence[int], dwell: float, stop_spacing: int = 1) -> FleetPlan:
    """Buses needed to hold headway ``3600/F`` over a two-way round trip."""
    counts, trips = [], []
    for r, f in zip(routes, freqs):
        if f < 1:
            raise ValueError(f"frequency must be a positive integer, got {f}")
        travel = sum(graph.edge(a, b).travel_time for a, b in zip(r[:-1], r[1:]))
        n_stops = len(r[::stop_spacing])
        T = 2.0 * (travel + dwell * n_stops)
        counts.append(max(1, math.ceil(T / (3600.0 / f) - 1e-9)))
        trips.append(T)
    return FleetPlan(counts, trips)


def project(graph, routes, demand, capacity=40.0, delta_max=1.0, dwell=60.0):
    """Loads, frequencies and fleet for a finished route set in one call."""
    loads = assign_segment_loads(graph, routes, demand)
    freqs = max_load_frequencies(loads, capacity, delta_max)
    return loads, freqs, fleet_size(graph, routes, freqs, dwell)

