"""Search-guided self-play training, the PPO baseline trainer, and policy evaluation."""

from __future__ import annotations

import json
import math
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .designenv import DesignEnv, DesignState, EnvConfig, Evaluation
from .netmodel import DemandMatrix, RoadGraph, StateEncoding
from .policy import (
    NetConfig, PolicyValueNet, alphatransit_loss, load_checkpoint, masked_policy, ppo_loss,
    restore_optimizer, save_checkpoint,
)
from .search import NeuralEvaluator, expand_evaluate, SearchConfig, SearchNode, reroot, root_policy, run_search, trace_entry
from .transitsim import SimConfig

VALUE_CLIP = 3.0
NORM_EPS = 1e-8


def c_puct_for(alpha: float) -> float:
    """Exploration constant used with each modal split (1.0 at 0.3, 1.5 at full transit share)."""
    return 1.0 if alpha < 0.65 else 1.5


def temperature(progress: float) -> float:
    if progress < 0.3:
        return 1.0
    if progress < 0.6:
        return 0.7
    return 0.5


class RewardStats:
    """Running mean and population variance (Welford)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, x: float) -> None:
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self._m2 += d * (x - self.mean)

    @property
    def var(self) -> float:
        return self._m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 0.0))

    def state(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self._m2}

    @classmethod
    def from_state(cls, d: dict) -> "RewardStats":
        s = cls()
        s.count, s.mean, s._m2 = int(d["count"]), float(d["mean"]), float(d["m2"])
        return s


def normalize_value(z: float, stats: RewardStats) -> float:
    return float(np.clip((z - stats.mean) / (stats.std + NORM_EPS), -VALUE_CLIP, VALUE_CLIP))


@dataclass
class Sample:
    encoding: StateEncoding
    mask: np.ndarray
    pi: np.ndarray  # length n, zero outside the mask
    z: float


class ReplayBuffer:
    """FIFO ring of search targets with uniform sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: deque[Sample] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.items)

    def add(self, sample: Sample) -> None:
        self.items.append(sample)

    def extend(self, samples: Sequence[Sample]) -> None:
        for s in samples:
            self.items.append(s)

    def sample(self, k: int, rng: np.random.Generator) -> list[Sample]:
        if not self.items:
            raise ValueError("buffer is empty")
        idx = rng.integers(len(self.items), size=k)
        return [self.items[i] for i in idx]


# --- episode collection -----------------------------------------------------------------


@dataclass
class Episode:
    states: list[DesignState]
    samples: list[Sample]
    z: float
    steps: int  # decisions plus forced finalisations
    routes: tuple[tuple[int, ...], ...]
    evaluation: Evaluation | None = None
    trace: list[dict] = field(default_factory=list)


def run_design_episode(
    env: DesignEnv,
    evaluator,
    cfg: SearchConfig,
    tau: float,
    rng: np.random.Generator,
    sim_seed: int,
    fresh_tree_on_forced: bool = True,
    on_decision=None,
) -> Episode:
    """Build one design with search at every decision, then evaluate it once.

    ``on_decision(state)`` is called before each search; the rollout baseline
    uses it to keep per-decision evaluation counts.
    """
    state, forced0 = env.settle(env.initial_state())
    steps = forced0
    root = SearchNode(state)
    states, samples, trace = [], [], []
    outcome = None
    while not env.is_done(state):
        if not root.expanded:
            expand_evaluate(root, env, evaluator)
        if on_decision is not None:
            on_decision(state)
        run_search(root, env, evaluator, cfg, rng)
        pi_c = root_policy(root.N, tau)
        i = int(rng.choice(len(pi_c), p=pi_c))
        action = int(root.actions[i])
        mask = env.mask(state)
        pi = np.zeros(env.graph.n)
        pi[root.actions] = pi_c
        states.append(state)
        samples.append(Sample(env.encode(state), mask, pi, 0.0))
        trace.append(trace_entry(root, pi_c, action))
        try:
            outcome = env.step(state, action, seed=sim_seed)
        except Exception as err:  # nothing from this episode reaches the buffer
            raise RuntimeError(f"episode aborted after routes {state.routes} + action {action}: {err}") from err
        steps += 1 + outcome.forced
        root = reroot(root, action, outcome.state, forced=fresh_tree_on_forced and outcome.forced > 0)
        state = outcome.state
    if outcome is None:  # every route was forced: the design is fixed without decisions
        evaluation = env.evaluate(state.completed, seed=sim_seed)
    else:
        evaluation = outcome.evaluation
    z = float(evaluation.reward)
    for s in samples:
        s.z = z
    return Episode(states, samples, z, steps, state.completed, evaluation, trace)


def collect_episode(env, net: PolicyValueNet, cfg: SearchConfig, tau: float, rng, sim_seed: int) -> Episode:
    return run_design_episode(env, NeuralEvaluator(net), cfg, tau, rng, sim_seed)


def train_iteration(net: PolicyValueNet, opt: ad.Adam, buffer: ReplayBuffer, stats: RewardStats, steps: int,
                    batch_size: int, rng: np.random.Generator) -> list[dict]:
    """``steps`` minibatch updates on cross-entropy to the search policy plus squared value error."""
    if not len(buffer):
        raise ValueError("buffer is empty")
    trace = []
    for _ in range(steps):
        batch = buffer.sample(batch_size, rng)
        z = [normalize_value(s.z, stats) for s in batch]
        opt.zero_grad()
        parts = alphatransit_loss(net, [s.encoding for s in batch], [s.mask for s in batch],
                                  [s.pi for s in batch], z)
        parts.total.backward()
        gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in net.parameters() if p.grad is not None))
        opt.step()
        trace.append({"loss": parts.total.item(), "policy": parts.policy, "value": parts.value, "grad_norm": gnorm})
    return trace


# --- configuration ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    env_steps: int = 1_000_000
    workers: int = 1
    episodes_per_worker: int = 1
    train_steps: int = 200
    batch_size: int = 256
    lr: float = 1e-4
    buffer_size: int = 50_000
    seed: int = 0
    checkpoint_every: int = 10  # iterations; 0 disables periodic checkpoints
    search: SearchConfig = field(default_factory=SearchConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def validate(self) -> None:
        if self.env_steps < 0:
            raise ValueError("env_steps must be >= 0")
        if self.workers < 1 or self.episodes_per_worker < 1:
            raise ValueError("workers and episodes_per_worker must be >= 1")
        if self.train_steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.buffer_size < 1:
            raise ValueError("invalid optimisation settings")
        self.search.validate()


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["search"] = SearchConfig(**d.get("search", {}))
    d["net"] = NetConfig(**d.get("net", {}))
    return TrainConfig(**d)


@dataclass
class Problem:
    """Everything a worker needs to rebuild the environment."""

    graph: RoadGraph
    demand: DemandMatrix
    env_cfg: EnvConfig
    sim_cfg: SimConfig

    def make_env(self) -> DesignEnv:
        return DesignEnv(self.graph, self.demand, self.env_cfg, self.sim_cfg)


def _worker_episodes(args) -> list[Episode]:
    problem, net_cfg, params, search_cfg, tau, seeds = args
    env = problem.make_env()
    net = PolicyValueNet(net_cfg)
    net.set_flat(params)
    out = []
    for ep_seed in seeds:
        rng = np.random.default_rng(ep_seed)
        out.append(collect_episode(env, net, search_cfg, tau, rng, int(rng.integers(2**31))))
    return out


def _episode_seeds(seed: int, iteration: int, worker: int, count: int) -> list[int]:
    ss = np.random.SeedSequence([seed, iteration, worker])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(count)]


class AlphaTransitTrainer:
    """Iteration-synchronous self-play: collect episodes, merge into the buffer, optimise."""

    def __init__(self, problem: Problem, cfg: TrainConfig, out_dir: str | Path | None = None):
        cfg.validate()
        self.problem = problem
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.net = PolicyValueNet(cfg.net, seed=cfg.seed)
        self.opt = ad.Adam(self.net.parameters(), lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_size)
        self.stats = RewardStats()
        self.env_steps = 0
        self.iteration = 0
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
        self.history: list[dict] = []
        self._smoothed: float | None = None

    # --- persistence -------------------------------------------------------------------

    def _meta(self) -> dict:
        return {
            "kind": "alphatransit",
            "env_steps": self.env_steps,
            "iteration": self.iteration,
            "progress": self.progress,
            "reward_stats": self.stats.state(),
            "smoothed_reward": self._smoothed,
            "train_config": _jsonable(asdict(self.cfg)),
        }

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.net, self.opt, self._meta())

    @classmethod
    def resume(cls, problem: Problem, path: str | Path, out_dir=None, **overrides) -> "AlphaTransitTrainer":
        """Continue from a checkpoint. The replay buffer is not stored and starts empty."""
        net, meta, opt_state = load_checkpoint(path)
        cfg = _config_from_dict(meta["train_config"])
        for k, v in overrides.items():
            setattr(cfg, k, v)
        tr = cls(problem, cfg, out_dir)
        tr.net = net
        tr.opt = ad.Adam(net.parameters(), lr=cfg.lr)
        restore_optimizer(tr.opt, opt_state)
        tr.stats = RewardStats.from_state(meta["reward_stats"])
        tr.env_steps = int(meta["env_steps"])
        tr.iteration = int(meta["iteration"])
        tr._smoothed = meta.get("smoothed_reward")
        tr.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, tr.iteration]))
        return tr

    # --- training --------------------------------------------------------------------------

    @property
    def progress(self) -> float:
        return min(1.0, self.env_steps / self.cfg.env_steps) if self.cfg.env_steps else 1.0

    def collect(self, tau: float) -> list[Episode]:
        cfg = self.cfg
        params = self.net.get_flat()
        jobs = [
            (self.problem, cfg.net, params, cfg.search, tau,
             _episode_seeds(cfg.seed, self.iteration, w, cfg.episodes_per_worker))
            for w in range(cfg.workers)
        ]
        if cfg.workers == 1:
            results = [_worker_episodes(jobs[0])]
        else:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_worker_episodes, jobs))
        return [ep for batch in results for ep in batch]

    def optimise(self) -> list[dict]:
        return train_iteration(self.net, self.opt, self.buffer, self.stats, self.cfg.train_steps,
                               self.cfg.batch_size, self.rng)

    def step(self) -> dict:
        t0 = time.time()
        tau = temperature(self.progress)
        episodes = self.collect(tau)
        for ep in episodes:
            self.stats.update(ep.z)
            self.buffer.extend(ep.samples)
        self.env_steps += sum(ep.steps for ep in episodes)
        mean_z = float(np.mean([ep.z for ep in episodes]))
        self._smoothed = mean_z if self._smoothed is None else 0.9 * self._smoothed + 0.1 * mean_z
        trace = self.optimise() if len(self.buffer) else []
        self.iteration += 1
        rec = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "episodes": len(episodes),
            "mean_z": mean_z,
            "smoothed_reward": self._smoothed,
            "loss": float(np.mean([t["loss"] for t in trace])) if trace else None,
            "policy_loss": float(np.mean([t["policy"] for t in trace])) if trace else None,
            "value_loss": float(np.mean([t["value"] for t in trace])) if trace else None,
            "tau": tau,
            "buffer": len(self.buffer),
            "wall_time": round(time.time() - t0, 3),
        }
        self.history.append(rec)
        return rec

    def run(self, log_path: str | Path | None = None) -> list[dict]:
        """Train until the environment-step budget is spent."""
        log = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = log_path or self.out_dir / "train_log.jsonl"
        if log_path:
            log = open(log_path, "a")
        try:
            if self.out_dir and self.iteration == 0:
                self.save(self.out_dir / "checkpoint_init.npz")
            while self.env_steps < self.cfg.env_steps:
                rec = self.step()
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if self.out_dir and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"checkpoint_{self.iteration:05d}.npz")
            if self.out_dir:
                self.save(self.out_dir / "checkpoint_final.npz")
        finally:
            if log:
                log.close()
        return self.history


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# --- evaluation ------------------------------------------------------------------------------


def evaluate_search_policy(env: DesignEnv, net: PolicyValueNet, n_episodes: int, n_iter: int, c_puct: float,
                           seed: int = 0, tau: float = 0.1) -> list[Episode]:
    """Low-temperature sampling over visit counts, no root noise."""
    cfg = SearchConfig(n_iter=n_iter, c_puct=c_puct, add_noise=False)
    out = []
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(collect_episode(env, net, cfg, tau, rng, int(rng.integers(2**31))))
    return out


def sample_policy_design(env: DesignEnv, net: PolicyValueNet, rng: np.random.Generator, tau: float = 1.0):
    """Roll out the raw network policy; returns ``(final state, per-decision records)``."""
    state, _ = env.settle(env.initial_state())
    records = []
    while not env.is_done(state):
        mask = env.mask(state)
        probs, value = net.predict(env.encode(state), mask)
        if tau != 1.0:
            probs = masked_policy(np.log(np.where(mask, probs, 1.0)) / tau, mask)
        a = int(rng.choice(len(probs), p=probs))
        records.append((state, mask, a, float(np.log(probs[a])), value))
        state, _, _ = env.apply(state, a)
    return state, records


# --- PPO baseline ------------------------------------------------------------------------------

PPO_PRESETS = {
    0.3: dict(lr=5e-5, clip=0.2, epochs=8, batch_size=256, entropy_coef=0.01, lr_anneal=False),
    1.0: dict(lr=1e-5, clip=0.1, epochs=4, batch_size=128, entropy_coef=0.02, lr_anneal=True),
}


@dataclass
class PPOConfig:
    env_steps: int = 1_000_000
    episodes_per_iter: int = 16
    gamma: float = 0.999
    lam: float = 0.95
    lr: float = 5e-5
    clip: float = 0.2
    epochs: int = 8
    batch_size: int = 256
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr_anneal: bool = False
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)

    @classmethod
    def for_alpha(cls, alpha: float, **kw) -> "PPOConfig":
        key = 0.3 if alpha < 0.65 else 1.0
        return cls(**{**PPO_PRESETS[key], **kw})


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns for one finished trajectory."""
    T = len(rewards)
    adv = np.zeros(T)
    nxt_v, acc = last_value, 0.0
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * nxt_v - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt_v = values[t]
    return adv, adv + np.asarray(values, dtype=np.float64)


class PPOTrainer:
    """Clipped-surrogate training on full episodes with coverage shaping.

    Shaping and terminal rewards keep separate running statistics: shaping
    rewards are divided by their running deviation, terminal rewards are
    standardised and clipped like the search targets.
    """

    def __init__(self, env: DesignEnv, cfg: PPOConfig, out_dir: str | Path | None = None):
        self.env = env
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.net = PolicyValueNet(cfg.net, seed=cfg.seed)
        self.opt = ad.Adam(self.net.parameters(), lr=cfg.lr)
        self.shaping_stats = RewardStats()
        self.terminal_stats = RewardStats()
        self.env_steps = 0
        self.iteration = 0
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
        self.history: list[dict] = []

    def collect(self):
        env = self.env
        trans, zs = [], []
        for _ in range(self.cfg.episodes_per_iter):
            state, forced = env.settle(env.initial_state())
            steps = forced
            rec = []
            sim_seed = int(self.rng.integers(2**31))
            out = None
            while not env.is_done(state):
                mask = env.mask(state)
                enc = env.encode(state)
                probs, value = self.net.predict(enc, mask)
                a = int(self.rng.choice(len(probs), p=probs))
                out = env.step(state, a, shaping=True, seed=sim_seed)
                self.shaping_stats.update(out.shaping_reward)
                rec.append([enc, mask, a, float(np.log(probs[a])), value, out.shaping_reward])
                steps += 1 + out.forced
                state = out.state
            z = out.terminal_reward if out is not None else env.evaluate(state.completed, seed=sim_seed).reward
            self.terminal_stats.update(z)
            zs.append(z)
            self.env_steps += steps
            if not rec:
                continue
            rewards = [r[5] / (self.shaping_stats.std + NORM_EPS) for r in rec]
            rewards[-1] += normalize_value(z, self.terminal_stats)
            adv, ret = compute_gae(rewards, [r[4] for r in rec], self.cfg.gamma, self.cfg.lam)
            for r, A, R in zip(rec, adv, ret):
                trans.append((r[0], r[1], r[2], r[3], A, R))
        return trans, zs

    def update(self, trans) -> dict:
        cfg = self.cfg
        adv = np.array([t[4] for t in trans])
        if len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + NORM_EPS)
        lr = cfg.lr * (1.0 - self.progress) if cfg.lr_anneal else cfg.lr
        stats = []
        for _ in range(cfg.epochs):
            order = self.rng.permutation(len(trans))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                b = [trans[i] for i in idx]
                self.opt.zero_grad()
                parts = ppo_loss(self.net, [t[0] for t in b], [t[1] for t in b], [t[2] for t in b],
                                 [t[3] for t in b], adv[idx], [t[5] for t in b], cfg.clip, cfg.value_coef,
                                 cfg.entropy_coef)
                parts.total.backward()
                self.opt.step(lr=max(lr, 0.0))
                stats.append((parts.total.item(), parts.policy, parts.value, parts.entropy, parts.clip_frac))
        s = np.array(stats) if stats else np.zeros((1, 5))
        return dict(zip(("loss", "policy_loss", "value_loss", "entropy", "clip_frac"), s.mean(axis=0).tolist()))

    @property
    def progress(self) -> float:
        return min(1.0, self.env_steps / self.cfg.env_steps) if self.cfg.env_steps else 1.0

    def step(self) -> dict:
        t0 = time.time()
        trans, zs = self.collect()
        info = self.update(trans) if trans else {}
        self.iteration += 1
        rec = {"iteration": self.iteration, "env_steps": self.env_steps, "mean_z": float(np.mean(zs)),
               **info, "wall_time": round(time.time() - t0, 3)}
        self.history.append(rec)
        return rec

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self.opt, {
            "kind": "ppo", "env_steps": self.env_steps, "iteration": self.iteration, "progress": self.progress,
            "ppo_config": _jsonable(asdict(self.cfg)),
        })

    def run(self) -> list[dict]:
        log = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log = open(self.out_dir / "train_log.jsonl", "a")
            self.save(self.out_dir / "checkpoint_init.npz")
        try:
            while self.env_steps < self.cfg.env_steps:
                rec = self.step()
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
            if self.out_dir:
                self.save(self.out_dir / "checkpoint_final.npz")
        finally:
            if log:
                log.close()
        return self.history


def ppo_train(env: DesignEnv, cfg: PPOConfig, out_dir=None) -> PolicyValueNet:
    trainer = PPOTrainer(env, cfg, out_dir)
    trainer.run()
    return trainer.net
