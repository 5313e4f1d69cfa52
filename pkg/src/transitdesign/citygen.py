"""Seeded synthetic cities in the network file format."""

from __future__ import annotations

import numpy as np

from .netmodel import DemandMatrix, Edge, Network, RoadGraph

URBAN_SPEED = 16.67  # m/s


def grid_city(
    rows: int,
    cols: int,
    spacing: float = 800.0,
    demand_pairs: int | None = None,
    total_rate: float = 600.0,
    seed: int = 0,
    speed: float = URBAN_SPEED,
) -> Network:
    """``rows x cols`` lattice with the hub at the most central node."""
    if rows < 1 or cols < 1 or spacing <= 0:
        raise ValueError("grid needs rows, cols >= 1 and positive spacing")
    coords = [(c * spacing, r * spacing) for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append(Edge(i, i + 1, spacing, speed))
            if r + 1 < rows:
                edges.append(Edge(i, i + cols, spacing, speed))
    hub = ((rows - 1) // 2) * cols + (cols - 1) // 2
    graph = RoadGraph(coords, edges, hub)
    return Network(graph, _demand(graph, demand_pairs, total_rate, np.random.default_rng(seed)))


def geometric_city(
    n: int,
    n_edges: int,
    extent: float = 12_000.0,
    demand_pairs: int | None = None,
    total_rate: float = 600.0,
    seed: int = 0,
    speed: float = URBAN_SPEED,
) -> Network:
    """Connected random geometric graph: a Euclidean spanning tree plus the shortest extra links."""
    if n < 1:
        raise ValueError("need at least one node")
    max_edges = n * (n - 1) // 2
    if not n - 1 <= n_edges <= max_edges:
        raise ValueError(f"n_edges must lie in [{n - 1}, {max_edges}] for a connected simple graph")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.0, extent, size=(n, 2))
    dist = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])

    chosen: set[tuple[int, int]] = set()
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    link = np.zeros(n, dtype=np.int64)
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        chosen.add((min(v, int(link[v])), max(v, int(link[v]))))
        in_tree[v] = True
        closer = dist[v] < best
        best = np.where(closer, dist[v], best)
        link = np.where(closer, v, link)
    iu, ju = np.triu_indices(n, k=1)
    for idx in np.argsort(dist[iu, ju], kind="stable"):
        if len(chosen) >= n_edges:
            break
        chosen.add((int(iu[idx]), int(ju[idx])))

    edges = [Edge(u, v, max(float(dist[u, v]), 1.0), speed) for u, v in sorted(chosen)]
    centre = np.array([extent / 2, extent / 2])
    hub = int(np.argmin(np.hypot(*(pts - centre).T)))
    graph = RoadGraph([tuple(p) for p in pts], edges, hub)
    return Network(graph, _demand(graph, demand_pairs, total_rate, rng))


def _demand(graph: RoadGraph, pairs: int | None, total_rate: float, rng: np.random.Generator) -> DemandMatrix:
    """Gravity-style OD rates between a few strong attractors and many weak nodes."""
    n = graph.n
    possible = n * (n - 1)
    if pairs is None:
        pairs = possible
    if pairs < 0:
        raise ValueError("demand_pairs must be >= 0")
    pairs = min(pairs, possible)
    if pairs == 0 or total_rate <= 0:
        return DemandMatrix(n, {})
    mass = rng.gamma(0.6, 1.0, size=n)
    d = np.hypot(graph.coords[:, None, 0] - graph.coords[None, :, 0], graph.coords[:, None, 1] - graph.coords[None, :, 1])
    w = np.outer(mass, mass) / (1.0 + d / 1000.0)
    np.fill_diagonal(w, 0.0)
    flat = w.ravel()
    idx = rng.choice(n * n, size=pairs, replace=False, p=flat / flat.sum())
    rates = flat[idx] / flat[idx].sum() * total_rate
    entries = {(int(k // n), int(k % n)): round(float(r), 4) for k, r in zip(idx, rates)}
    return DemandMatrix(n, entries)
