"""PUCT tree search over route-construction states.

Values are stored from the single designer's point of view; there is no sign
flip between levels. Evaluators return ``(priors over candidates, value)`` and
decide for themselves how to value a finished design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .designenv import DesignEnv, DesignState, random_completion
from .policy import PolicyValueNet


@dataclass
class SearchConfig:
    n_iter: int = 500
    c_puct: float = 1.0
    dirichlet_alpha: float = 0.3
    dirichlet_eps: float = 0.25
    add_noise: bool = True
    temperature: float = 1.0

    def validate(self) -> None:
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not 0.0 <= self.dirichlet_eps <= 1.0:
            raise ValueError("dirichlet_eps must lie in [0, 1]")
        if self.dirichlet_alpha <= 0 or self.c_puct < 0 or self.temperature <= 0:
            raise ValueError("dirichlet_alpha and temperature must be positive, c_puct nonnegative")


class Evaluator(Protocol):
    def __call__(self, env: DesignEnv, state: DesignState) -> tuple[np.ndarray, float]: ...


class SearchNode:
    """Edge statistics for every candidate action of one state."""

    __slots__ = ("state", "actions", "P", "P_raw", "N", "W", "children", "expanded", "terminal", "value")

    def __init__(self, state: DesignState):
        self.state = state
        self.actions = np.zeros(0, dtype=np.int64)
        self.P = np.zeros(0)
        self.P_raw = np.zeros(0)
        self.N = np.zeros(0, dtype=np.int64)
        self.W = np.zeros(0)
        self.children: dict[int, SearchNode] = {}
        self.expanded = False
        self.terminal = False
        self.value = 0.0

    @property
    def Q(self) -> np.ndarray:
        out = np.zeros_like(self.W)
        seen = self.N > 0
        out[seen] = self.W[seen] / self.N[seen]
        return out

    @property
    def visits(self) -> int:
        return int(self.N.sum())

    def child(self, env: DesignEnv, action: int) -> "SearchNode":
        node = self.children.get(action)
        if node is None:
            nxt, _, _ = env.apply(self.state, action)
            node = self.children[action] = SearchNode(nxt)
        return node


def puct_select(node: SearchNode, c: float) -> int:
    """Index into ``node.actions`` maximising the PUCT score; ties go to the smallest node id."""
    scores = node.Q + c * node.P * math.sqrt(1 + node.N.sum()) / (1 + node.N)
    return int(np.argmax(scores))


def expand_evaluate(node: SearchNode, env: DesignEnv, evaluator: Evaluator) -> float:
    if env.is_done(node.state):
        node.terminal = True
        node.expanded = True
        _, node.value = evaluator(env, node.state)
        return node.value
    try:
        priors, value = evaluator(env, node.state)
    except Exception as err:  # keep the failing state in the message
        raise RuntimeError(f"evaluation failed at state {node.state}: {err}") from err
    actions = np.asarray(env.candidates(node.state), dtype=np.int64)
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != actions.shape:
        raise RuntimeError(f"evaluator returned {priors.shape[0]} priors for {len(actions)} candidates")
    node.actions = actions
    node.P = priors.copy()
    node.P_raw = priors.copy()
    node.N = np.zeros(len(actions), dtype=np.int64)
    node.W = np.zeros(len(actions))
    node.expanded = True
    node.value = float(value)
    return node.value


def backpropagate(path: list[tuple[SearchNode, int]], value: float) -> None:
    for node, i in path:
        node.N[i] += 1
        node.W[i] += value


def apply_root_noise(priors: np.ndarray, alpha: float, eps: float, rng: np.random.Generator) -> np.ndarray:
    if eps == 0 or len(priors) == 0:
        return np.asarray(priors, dtype=np.float64).copy()
    eta = rng.dirichlet(np.full(len(priors), alpha))
    return (1.0 - eps) * np.asarray(priors) + eps * eta


def root_policy(counts: np.ndarray, tau: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() < 1:
        raise ValueError("root has no visits")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    scaled = counts / counts.max()
    w = scaled ** (1.0 / tau)
    return w / w.sum()


def run_search(
    root: SearchNode,
    env: DesignEnv,
    evaluator: Evaluator,
    cfg: SearchConfig,
    rng: np.random.Generator | None = None,
) -> SearchNode:
    """Run ``cfg.n_iter`` simulations from ``root`` (expanding it first if needed)."""
    cfg.validate()
    if not root.expanded:
        expand_evaluate(root, env, evaluator)
    if root.terminal:
        return root
    if cfg.add_noise and rng is not None:
        root.P = apply_root_noise(root.P_raw, cfg.dirichlet_alpha, cfg.dirichlet_eps, rng)
    else:
        root.P = root.P_raw.copy()
    for _ in range(cfg.n_iter):
        node, path = root, []
        while node.expanded and not node.terminal:
            i = puct_select(node, cfg.c_puct)
            path.append((node, i))
            node = node.child(env, int(node.actions[i]))
        if not node.expanded:
            value = expand_evaluate(node, env, evaluator)
        elif getattr(evaluator, "resample_terminal", False):
            value = evaluator(env, node.state)[1]  # stochastic values: a fresh sample on every visit
        else:
            value = node.value
        backpropagate(path, value)
    return root


def reroot(root: SearchNode, action: int, next_state: DesignState, forced: bool = False) -> SearchNode:
    """Promote the chosen child to root; a forced finalisation or unknown child starts a fresh tree."""
    child = root.children.get(int(action))
    if forced or child is None or child.state != next_state:
        return SearchNode(next_state)
    child.P = child.P_raw.copy()
    return child


def trace_entry(root: SearchNode, pi: np.ndarray, action: int) -> dict:
    return {
        "candidates": root.actions.tolist(),
        "priors": [round(float(p), 6) for p in root.P_raw],
        "visits": root.N.tolist(),
        "q": [round(float(q), 6) for q in root.Q],
        "pi": [round(float(p), 6) for p in pi],
        "action": int(action),
    }


# --- evaluators ---------------------------------------------------------------------


class NeuralEvaluator:
    """One forward pass per state; outputs are memoised per state."""

    def __init__(self, net: PolicyValueNet, cache_size: int = 50_000):
        self.net = net
        self.cache: dict[DesignState, tuple[np.ndarray, float]] = {}
        self.cache_size = cache_size
        self.calls = 0

    def __call__(self, env: DesignEnv, state: DesignState) -> tuple[np.ndarray, float]:
        hit = self.cache.get(state)
        if hit is not None:
            return hit
        self.calls += 1
        mask = env.mask(state)
        if mask.any():
            probs, value = self.net.predict(env.encode(state), mask)
            out = (probs[mask], value)
        else:
            with ad.no_grad():
                value = float(self.net.forward([env.encode(state)]).value.data[0])
            out = (np.zeros(0), value)
        if len(self.cache) >= self.cache_size:
            self.cache.clear()
        self.cache[state] = out
        return out


class RolloutEvaluator:
    """Uniform priors; value from one random completion and one evaluation of the result.

    ``normalize`` maps a raw terminal reward to the tree's value scale (for
    example an online running-statistics normaliser).
    """

    resample_terminal = True  # finished designs are re-simulated on every visit

    def __init__(self, rng: np.random.Generator, normalize: Callable[[float], float] | None = None):
        self.rng = rng
        self.normalize = normalize or (lambda z: z)
        self.calls = 0

    def __call__(self, env: DesignEnv, state: DesignState) -> tuple[np.ndarray, float]:
        self.calls += 1
        final = random_completion(env, state, self.rng)
        z = env.evaluate(final.completed, seed=int(self.rng.integers(2**31))).reward
        k = len(env.candidates(state))
        return np.full(k, 1.0 / k) if k else np.zeros(0), float(self.normalize(z))


class OracleEvaluator:
    """Uniform priors and the exact best completion value, by exhaustive enumeration."""

    def __init__(self, value_fn: Callable[[DesignEnv, DesignState], float]):
        self.value_fn = value_fn

    def __call__(self, env: DesignEnv, state: DesignState) -> tuple[np.ndarray, float]:
        k = len(env.candidates(state))
        return np.full(k, 1.0 / k) if k else np.zeros(0), float(self.value_fn(env, state))


def best_completion_value(env: DesignEnv, state: DesignState, reward: Callable[[tuple], float], memo: dict) -> float:
    """Maximum terminal reward over every completion of ``state``."""
    if state in memo:
        return memo[state]
    if env.is_done(state):
        v = reward(state.completed)
    else:
        v = max(best_completion_value(env, env.apply(state, a)[0], reward, memo) for a in env.candidates(state))
    memo[state] = v
    return v

