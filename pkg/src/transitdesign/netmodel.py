"""Road graph, OD demand, candidate sets and the per-node state encoding."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_NODE_FEATURES = 16

# column layout of the node feature matrix
COL_X, COL_Y, COL_DEGREE = 0, 1, 2
COL_D_OUT, COL_D_IN = 3, 4
COL_CAND_OUT, COL_CAND_IN = 5, 6
COL_CORE_OUT, COL_CORE_IN = 7, 8
COL_CUR_OUT, COL_CUR_IN, COL_CMP_OUT, COL_CMP_IN = 9, 10, 11, 12
COL_IN_CURRENT, COL_COMPLETED_FRAC, COL_VALID_NEXT = 13, 14, 15


class NetworkFormatError(ValueError):
    """Raised when a network file or in-memory network violates the schema."""


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float
    free_speed: float

    @property
    def travel_time(self) -> float:
        return self.length / self.free_speed


class RoadGraph:
    """Undirected road graph with dense node ids ``0..n-1``.

    Adjacency lists are sorted ascending so every traversal that walks them is
    deterministic.
    """

    def __init__(
        self,
        coords: Sequence[tuple[float, float]],
        edges: Iterable[Edge],
        transit_center: int,
        source_ids: Sequence | None = None,
    ):
        self.coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        self.n = len(self.coords)
        self.source_ids = list(source_ids) if source_ids is not None else list(range(self.n))
        if not 0 <= transit_center < self.n:
            raise NetworkFormatError(f"transit_center {transit_center} is not a valid node id")
        self.transit_center = int(transit_center)

        self.edges: list[Edge] = []
        self._edge_of: dict[tuple[int, int], Edge] = {}
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for e in edges:
            u, v = int(e.u), int(e.v)
            if u == v:
                raise NetworkFormatError(f"self-loop edge ({u},{v})")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise NetworkFormatError(f"edge ({u},{v}) references a missing node")
            if not (e.length > 0 and e.free_speed > 0):
                raise NetworkFormatError(
                    f"edge ({u},{v}) needs positive length and free_speed, got {e.length}, {e.free_speed}"
                )
            key = (min(u, v), max(u, v))
            if key in self._edge_of:
                raise NetworkFormatError(f"duplicate edge ({u},{v})")
            e = Edge(u, v, float(e.length), float(e.free_speed))
            self.edges.append(e)
            self._edge_of[key] = e
            adj[u].append(v)
            adj[v].append(u)
        self.adj: list[tuple[int, ...]] = [tuple(sorted(a)) for a in adj]
        self.degree = np.array([len(a) for a in self.adj], dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edge_of

    def edge(self, u: int, v: int) -> Edge:
        return self._edge_of[(min(u, v), max(u, v))]

    def arcs(self) -> np.ndarray:
        """Directed arc list (2, 2|E|) holding both (u, v) and (v, u)."""
        if not self.edges:
            return np.zeros((2, 0), dtype=np.int64)
        fwd = np.array([(e.u, e.v) for e in self.edges], dtype=np.int64)
        return np.concatenate([fwd, fwd[:, ::-1]], axis=0).T.copy()

    def arc_features(self) -> np.ndarray:
        """Per-arc (length, free_speed), min-max scaled over the network."""
        if not self.edges:
            return np.zeros((0, 2))
        raw = np.array([(e.length, e.free_speed) for e in self.edges], dtype=np.float64)
        raw = np.concatenate([raw, raw], axis=0)
        return _minmax_columns(raw)

    def route_length(self, route: Sequence[int]) -> float:
        return sum(self.edge(a, b).length for a, b in zip(route[:-1], route[1:]))


@dataclass
class DemandMatrix:
    """Sparse OD trip rates (trips/hour) and the transit modal split."""

    n: int
    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise NetworkFormatError(f"alpha must lie in [0, 1], got {self.alpha}")
        for (o, d), r in self.entries.items():
            if not (0 <= o < self.n and 0 <= d < self.n):
                raise NetworkFormatError(f"demand ({o},{d}) references a missing node")
            if r < 0 or not math.isfinite(r):
                raise NetworkFormatError(f"demand ({o},{d}) has invalid rate {r}")

    @classmethod
    def from_dense(cls, mat, alpha: float = 1.0) -> "DemandMatrix":
        mat = np.asarray(mat, dtype=np.float64)
        entries = {(int(i), int(j)): float(mat[i, j]) for i, j in zip(*np.nonzero(mat))}
        return cls(mat.shape[0], entries, alpha)

    def with_alpha(self, alpha: float) -> "DemandMatrix":
        return DemandMatrix(self.n, dict(self.entries), alpha)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for (o, d), r in self.entries.items():
            out[o, d] += r
        return out

    def transit(self, o: int, d: int) -> float:
        return self.alpha * self.entries.get((o, d), 0.0)

    def total(self, include_diagonal: bool = False) -> float:
        return sum(r for (o, d), r in self.entries.items() if include_diagonal or o != d)


def od_marginals(demand: DemandMatrix, i: int) -> tuple[float, float]:
    """Total trips/hour leaving and entering node ``i``."""
    out_rate = sum(r for (o, _), r in demand.entries.items() if o == i)
    in_rate = sum(r for (_, d), r in demand.entries.items() if d == i)
    return out_rate, in_rate


@dataclass(frozen=True)
class PartialDesign:
    completed: tuple[tuple[int, ...], ...]
    current: tuple[int, ...]
    routes_total: int
    max_len: int

    @property
    def frontier(self) -> int:
        return self.current[-1]


def candidate_set(graph: RoadGraph, current: Sequence[int]) -> list[int]:
    """Unvisited one-hop neighbours of the frontier of ``current``, ascending."""
    if not current:
        raise ValueError("current route is empty")
    visited = set(current)
    return [v for v in graph.adj[current[-1]] if v not in visited]


@dataclass(frozen=True)
class StateEncoding:
    node_features: np.ndarray
    edge_index: np.ndarray
    edge_features: np.ndarray

    @property
    def n(self) -> int:
        return self.node_features.shape[0]


def _minmax_columns(a: np.ndarray) -> np.ndarray:
    lo = a.min(axis=0)
    span = a.max(axis=0) - lo
    out = np.full_like(a, 0.5)
    ok = span > 0
    out[:, ok] = (a[:, ok] - lo[ok]) / span[ok]
    return out


class StateEncoder:
    """Builds the 16-column node feature matrix for partial designs on one network.

    The static columns (geometry, degree, OD marginals) and the scaled dense
    demand matrix are computed once and shared across calls.
    """

    def __init__(self, graph: RoadGraph, demand: DemandMatrix):
        self.graph = graph
        n = graph.n
        mat = demand.dense()
        out_tot = mat.sum(axis=1)
        in_tot = mat.sum(axis=0)
        ref = max(out_tot.max(initial=0.0), in_tot.max(initial=0.0))
        self.demand_ref = ref
        self._scaled = mat / ref if ref > 0 else np.zeros_like(mat)

        static = np.zeros((n, N_NODE_FEATURES))
        if n:
            static[:, [COL_X, COL_Y]] = _minmax_columns(graph.coords)
            max_deg = graph.degree.max()
            if max_deg > 0:
                static[:, COL_DEGREE] = graph.degree / max_deg
            static[:, COL_D_OUT] = self._scaled.sum(axis=1)
            static[:, COL_D_IN] = self._scaled.sum(axis=0)
        self._static = static
        self.edge_index = graph.arcs()
        self.edge_features = graph.arc_features()

    def encode(self, completed: Sequence[Sequence[int]], current: Sequence[int]) -> StateEncoding:
        g = self.graph
        D = self._scaled
        X = self._static.copy()
        cand = candidate_set(g, current) if current else []

        cur = np.zeros(g.n, dtype=bool)
        cur[list(current)] = True
        cmp_count = np.zeros(g.n)
        for r in completed:
            cmp_count[list(r)] += 1
        cmp = cmp_count > 0
        core = cur | cmp
        valid = np.zeros(g.n, dtype=bool)
        valid[cand] = True

        to_cur = D[:, cur].sum(axis=1)
        from_cur = D[cur, :].sum(axis=0)
        X[:, COL_CUR_OUT] = to_cur
        X[:, COL_CUR_IN] = from_cur
        X[:, COL_CMP_OUT] = D[:, cmp].sum(axis=1)
        X[:, COL_CMP_IN] = D[cmp, :].sum(axis=0)
        X[:, COL_CAND_OUT] = np.where(valid, to_cur, 0.0)
        X[:, COL_CAND_IN] = np.where(valid, from_cur, 0.0)
        X[:, COL_CORE_OUT] = np.where(core, D[:, core].sum(axis=1), 0.0)
        X[:, COL_CORE_IN] = np.where(core, D[core, :].sum(axis=0), 0.0)
        X[:, COL_IN_CURRENT] = cur
        X[:, COL_COMPLETED_FRAC] = cmp_count / len(completed) if completed else 0.0
        X[:, COL_VALID_NEXT] = valid
        return StateEncoding(X, self.edge_index, self.edge_features)


def encode_state(graph: RoadGraph, demand: DemandMatrix, partial: PartialDesign) -> StateEncoding:
    return StateEncoder(graph, demand).encode(partial.completed, partial.current)


def estimate_search_space(
    n_nodes: int, n_edges: int, routes: int, route_edges: int, hub_start: bool = True
) -> tuple[float, float]:
    """Approximate count of hub- or freely-started route sets.

    Uses the average degree ``d = 2|E|/|V|``: a route of ``route_edges`` hops
    has about ``d * (d-1)**(route_edges-1)`` realisations, multiplied by
    ``|V|`` when the start node is free. Returns ``(per_route, log10(total))``.
    """
    if route_edges < 1:
        raise ValueError("route_edges must be >= 1")
    d = 2.0 * n_edges / n_nodes if n_nodes else 0.0
    if d <= 1.0:
        warnings.warn(f"average degree {d:.3f} <= 1; search-space estimate reported as 0")
        return 0.0, float("-inf")
    per_route = d * (d - 1.0) ** (route_edges - 1)
    if not hub_start:
        per_route *= n_nodes
    return per_route, routes * math.log10(per_route)


# --- file I/O -------------------------------------------------------------------


@dataclass
class Network:
    graph: RoadGraph
    demand: DemandMatrix
    real_routes: list[list[int]] | None = None


def _require(rec: dict, keys: Sequence[str], what: str):
    if not isinstance(rec, dict):
        raise NetworkFormatError(f"{what} record is not an object: {rec!r}")
    missing = [k for k in keys if k not in rec]
    if missing:
        raise NetworkFormatError(f"{what} record {rec!r} is missing {missing}")


def network_from_dict(doc: dict, alpha: float = 1.0) -> Network:
    for key in ("nodes", "edges", "transit_center"):
        if key not in doc:
            raise NetworkFormatError(f"network document is missing '{key}'")
    index: dict = {}
    coords = []
    for rec in doc["nodes"]:
        _require(rec, ("id", "x", "y"), "node")
        if rec["id"] in index:
            raise NetworkFormatError(f"duplicate node id in record {rec!r}")
        index[rec["id"]] = len(coords)
        coords.append((float(rec["x"]), float(rec["y"])))

    def dense(node_id, rec, what):
        if node_id not in index:
            raise NetworkFormatError(f"{what} record {rec!r} references unknown node {node_id!r}")
        return index[node_id]

    edges = []
    for rec in doc["edges"]:
        _require(rec, ("u", "v", "length", "free_speed"), "edge")
        u, v = dense(rec["u"], rec, "edge"), dense(rec["v"], rec, "edge")
        try:
            edges.append(Edge(u, v, float(rec["length"]), float(rec["free_speed"])))
        except (TypeError, ValueError) as exc:
            raise NetworkFormatError(f"edge record {rec!r}: {exc}") from None
    hub = dense(doc["transit_center"], {"transit_center": doc["transit_center"]}, "transit_center")
    try:
        graph = RoadGraph(coords, edges, hub, list(index))
    except NetworkFormatError as exc:
        bad = _find_bad_edge(doc["edges"], index)
        raise NetworkFormatError(f"{exc} (record {bad!r})" if bad else str(exc)) from None

    entries: dict[tuple[int, int], float] = {}
    for rec in doc.get("demand", []):
        _require(rec, ("o", "d", "rate"), "demand")
        o, d = dense(rec["o"], rec, "demand"), dense(rec["d"], rec, "demand")
        rate = float(rec["rate"])
        if rate < 0 or not math.isfinite(rate):
            raise NetworkFormatError(f"demand record {rec!r} has a negative or non-finite rate")
        entries[(o, d)] = entries.get((o, d), 0.0) + rate
    demand = DemandMatrix(graph.n, entries, alpha)

    real = None
    if doc.get("real_routes") is not None:
        real = []
        for route in doc["real_routes"]:
            real.append([dense(v, {"route": route}, "real_routes") for v in route])
    return Network(graph, demand, real)


def _find_bad_edge(records, index):
    seen = set()
    for rec in records:
        u, v = index.get(rec["u"]), index.get(rec["v"])
        if u is None or v is None or u == v:
            return rec
        if float(rec["length"]) <= 0 or float(rec["free_speed"]) <= 0:
            return rec
        key = (min(u, v), max(u, v))
        if key in seen:
            return rec
        seen.add(key)
    return None


def load_network(path: str | Path, alpha: float = 1.0) -> Network:
    """Read and validate a network JSON file; ids are densified in input order."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise NetworkFormatError(f"{path}: top-level value must be an object")
    return network_from_dict(doc, alpha)


def network_to_dict(net: Network) -> dict:
    g = net.graph
    doc = {
        "nodes": [{"id": i, "x": float(x), "y": float(y)} for i, (x, y) in enumerate(g.coords)],
        "edges": [
            {"u": e.u, "v": e.v, "length": e.length, "free_speed": e.free_speed} for e in g.edges
        ],
        "transit_center": g.transit_center,
        "demand": [
            {"o": o, "d": d, "rate": r} for (o, d), r in sorted(net.demand.entries.items())
        ],
    }
    if net.real_routes is not None:
        doc["real_routes"] = [list(r) for r in net.real_routes]
    return doc


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1))
