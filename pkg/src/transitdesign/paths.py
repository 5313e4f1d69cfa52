"""Deterministic minimum-hop paths.

Breadth-first search that expands neighbours in ascending id order and keeps
the first discoverer as parent. By induction over BFS levels this yields, for
every reachable target, the lexicographically smallest node sequence among
all minimum-hop paths.
"""

from __future__ import annotations

from collections import deque
from typing import Mapping, Sequence


class BFSTree:
    __slots__ = ("source", "parent", "order", "depth")

    def __init__(self, source: int, parent: dict[int, int], order: list[int], depth: dict[int, int]):
        self.source = source
        self.parent = parent
        self.order = order
        self.depth = depth

    def reaches(self, target: int) -> bool:
        return target in self.depth

    def path_to(self, target: int) -> list[int] | None:
        if target not in self.depth:
            return None
        path = [target]
        while path[-1] != self.source:
            path.append(self.parent[path[-1]])
        return path[::-1]


def bfs_tree(adj: Mapping[int, Sequence[int]] | Sequence[Sequence[int]], source: int) -> BFSTree:
    """``adj`` must list neighbours in ascending order."""
    parent: dict[int, int] = {}
    depth = {source: 0}
    order = [source]
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                parent[v] = u
                order.append(v)
                queue.append(v)
    return BFSTree(source, parent, order, depth)


def min_hop_path(adj, source: int, target: int) -> list[int] | None:
    return bfs_tree(adj, source).path_to(target)


def tree_edge_flows(tree: BFSTree, sink_rates: Mapping[int, float]) -> dict[tuple[int, int], float]:
    """Flow on each tree edge when ``sink_rates[j]`` travels from the root to ``j``.

    Keys are unordered pairs ``(min, max)``. Subtree sums accumulate in reverse
    BFS order, so the cost is linear in the tree size.
    """
    acc = {v: sink_rates.get(v, 0.0) for v in tree.order}
    flows: dict[tuple[int, int], float] = {}
    for v in reversed(tree.order[1:]):
        p = tree.parent[v]
        f = acc[v]
        if f:
            flows[(min(p, v), max(p, v))] = f
            acc[p] += f
    return flows
