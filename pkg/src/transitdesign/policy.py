"""Graph-attention policy-value network, masked policy and the two training losses."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .netmodel import N_NODE_FEATURES, StateEncoding

CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    in_dim: int = N_NODE_FEATURES
    edge_dim: int = 2
    embed: int = 64
    widths: tuple[int, ...] = (128, 128, 64, 64)
    heads: tuple[int, ...] = (8, 8, 4, 4)
    actor_hidden: tuple[int, ...] = (256, 128, 64)
    critic_hidden: tuple[int, ...] = (256, 128, 64)
    negative_slope: float = 0.2
    dropout: float = 0.0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.heads = tuple(self.heads)
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        if len(self.widths) != len(self.heads) or not self.widths:
            raise ValueError("widths and heads need the same nonzero length")
        if min(self.widths + self.heads) < 1 or self.embed < 1:
            raise ValueError("widths, heads and embed must be positive")

    @classmethod
    def for_blocks(cls, blocks: int, **kw) -> "NetConfig":
        """Default channel and head schedule for ``blocks`` attention blocks."""
        half, rest = blocks // 2, blocks - blocks // 2
        return cls(widths=(128,) * half + (64,) * rest, heads=(8,) * half + (4,) * rest, **kw)


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


@dataclass
class Batch:
    """Disjoint union of graph states, ready for one forward pass."""

    x: np.ndarray  # (N, in_dim)
    src: np.ndarray  # (E,) including one self-loop per node
    dst: np.ndarray
    edge_attr: np.ndarray  # (E, edge_dim)
    graph_of: np.ndarray  # (N,) graph index per node
    offsets: np.ndarray  # (G+1,) node offset of each graph
    n_graphs: int

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def make_batch(encodings: Sequence[StateEncoding]) -> Batch:
    xs, srcs, dsts, eas, gids = [], [], [], [], []
    offsets = [0]
    for g, enc in enumerate(encodings):
        n = enc.n
        base = offsets[-1]
        loops = np.arange(n)
        srcs.append(np.concatenate([enc.edge_index[0], loops]) + base)
        dsts.append(np.concatenate([enc.edge_index[1], loops]) + base)
        ef = np.asarray(enc.edge_features, dtype=np.float64).reshape(-1, 2)
        eas.append(np.vstack([ef, np.zeros((n, 2))]))
        xs.append(enc.node_features)
        gids.append(np.full(n, g))
        offsets.append(base + n)
    return Batch(
        np.vstack(xs),
        np.concatenate(srcs).astype(np.int64),
        np.concatenate(dsts).astype(np.int64),
        np.vstack(eas),
        np.concatenate(gids).astype(np.int64),
        np.array(offsets, dtype=np.int64),
        len(encodings),
    )


@dataclass
class NetOutput:
    logits: Tensor  # (N,) flat over the batch
    value: Tensor  # (G,)
    batch: Batch
    attention: list[np.ndarray] = field(default_factory=list)  # per block, (E, heads)


class PolicyValueNet:
    """Shared attention backbone with a node-wise actor and a pooled critic.

    Parameters live in an ordered name -> Tensor map. Self-loops with zero
    edge features are added inside the forward pass so that every node attends
    at least to itself.
    """

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        self.cfg = cfg or NetConfig()
        rng = np.random.default_rng(seed)
        c = self.cfg
        p: dict[str, np.ndarray] = {}

        def linear(name, din, dout, bias=True, gain=1.0):
            p[f"{name}.W"] = orthogonal(rng, (din, dout), gain)
            if bias:
                p[f"{name}.b"] = np.zeros(dout)

        linear("input", c.in_dim, c.embed)
        din = c.embed
        for b, (w, h) in enumerate(zip(c.widths, c.heads)):
            pre = f"block{b}"
            p[f"{pre}.ln.gamma"] = np.ones(din)
            p[f"{pre}.ln.beta"] = np.zeros(din)
            linear(f"{pre}.src", din, h * w)
            linear(f"{pre}.dst", din, h * w)
            linear(f"{pre}.edge", c.edge_dim, h * w, bias=False)
            p[f"{pre}.att"] = orthogonal(rng, (h, w))
            p[f"{pre}.bias"] = np.zeros(w)
            if din != w:
                linear(f"{pre}.res", din, w, bias=False)
            din = w
        linear("jk", sum(c.widths), c.embed)
        d = c.embed
        for i, hdim in enumerate(c.actor_hidden):
            linear(f"actor{i}", d, hdim)
            d = hdim
        linear("actor_out", d, 1, gain=0.01)
        d = 2 * c.embed
        for i, hdim in enumerate(c.critic_hidden):
            linear(f"critic{i}", d, hdim)
            d = hdim
        linear("critic_out", d, 1)
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    # --- parameters -------------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def get_flat(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_flat(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self.params):
            raise ValueError("parameter names do not match this network")
        for k, t in self.params.items():
            if values[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {values[k].shape} vs {t.data.shape}")
            t.data = np.array(values[k], dtype=np.float64)

    def clone(self) -> "PolicyValueNet":
        other = PolicyValueNet.__new__(PolicyValueNet)
        other.cfg = self.cfg
        other.params = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()}
        return other

    # --- forward --------------------------------------------------------------------------

    def forward(self, batch: Batch | Sequence[StateEncoding], rng: np.random.Generator | None = None,
                keep_attention: bool = False) -> NetOutput:
        if not isinstance(batch, Batch):
            batch = make_batch(batch)
        c, P = self.cfg, self.params
        if batch.x.shape[1] != c.in_dim or batch.edge_attr.shape[1] != c.edge_dim:
            raise ValueError(
                f"expected {c.in_dim} node and {c.edge_dim} edge features, got "
                f"{batch.x.shape[1]} and {batch.edge_attr.shape[1]}"
            )
        N, E = batch.n_nodes, len(batch.src)
        drop = c.dropout if rng is not None else 0.0

        h = Tensor(batch.x) @ P["input.W"] + P["input.b"]
        ea = Tensor(batch.edge_attr)
        outs, attn = [], []
        for b, (w, heads) in enumerate(zip(c.widths, c.heads)):
            pre = f"block{b}"
            hn = ad.layer_norm(h, P[f"{pre}.ln.gamma"], P[f"{pre}.ln.beta"])
            xs = hn @ P[f"{pre}.src.W"] + P[f"{pre}.src.b"]
            xd = hn @ P[f"{pre}.dst.W"] + P[f"{pre}.dst.b"]
            xs_e = ad.take(xs, batch.src)
            m = xs_e + ad.take(xd, batch.dst) + ea @ P[f"{pre}.edge.W"]
            m = ad.leaky_relu(m, c.negative_slope).reshape(E, heads, w)
            scores = (m * P[f"{pre}.att"]).sum(axis=2)  # (E, heads)
            alpha = ad.segment_softmax(scores, batch.dst, N)
            alpha = ad.dropout(alpha, drop, rng)
            if keep_attention:
                attn.append(alpha.data.copy())
            msg = xs_e.reshape(E, heads, w) * alpha.reshape(E, heads, 1)
            agg = ad.segment_sum(msg.reshape(E, heads * w), batch.dst, N).reshape(N, heads, w)
            out = ad.tanh(agg.mean(axis=1) + P[f"{pre}.bias"])
            out = ad.dropout(out, drop, rng)
            res = h @ P[f"{pre}.res.W"] if f"{pre}.res.W" in P else h
            h = out + res
            outs.append(h)
        z = ad.concat(outs, axis=1) @ P["jk.W"] + P["jk.b"]

        a = z
        for i in range(len(c.actor_hidden)):
            a = ad.tanh(a @ P[f"actor{i}.W"] + P[f"actor{i}.b"])
        logits = (a @ P["actor_out.W"] + P["actor_out.b"]).reshape(N)

        G = batch.n_graphs
        counts = np.bincount(batch.graph_of, minlength=G).astype(np.float64)
        mean_pool = ad.segment_sum(z, batch.graph_of, G) / counts[:, None]
        max_pool = ad.segment_max(z, batch.graph_of, G)
        v = ad.concat([mean_pool, max_pool], axis=1)
        for i in range(len(c.critic_hidden)):
            v = ad.tanh(v @ P[f"critic{i}.W"] + P[f"critic{i}.b"])
        value = (v @ P["critic_out.W"] + P["critic_out.b"]).reshape(G)
        return NetOutput(logits, value, batch, attn)

    def predict(self, enc: StateEncoding, mask: np.ndarray) -> tuple[np.ndarray, float]:
        """Masked action probabilities and value for one state, without recording a tape."""
        with ad.no_grad():
            out = self.forward([enc])
        return masked_policy(out.logits.data, mask), float(out.value.data[0])

    # --- checkpoints -------------------------------------------------------------------------

    def save(self, path: str | Path, optimizer: ad.Adam | None = None, meta: dict | None = None) -> None:
        save_checkpoint(path, self, optimizer, meta)


def masked_policy(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the unmasked entries of one logit vector; exact zeros elsewhere."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError("logits and mask shapes differ")
    if not mask.any():
        raise ValueError("every action is masked")
    z = np.where(mask, logits, -np.inf)
    e = np.exp(z - z.max())
    e[~mask] = 0.0
    return e / e.sum()


def _batch_log_policy(out: NetOutput, masks: Sequence[np.ndarray]) -> Tensor:
    flat = np.concatenate([np.asarray(m, dtype=bool) for m in masks])
    if flat.shape[0] != out.batch.n_nodes:
        raise ValueError("mask sizes do not match the batch")
    return ad.segment_log_softmax(out.logits, out.batch.graph_of, out.batch.n_graphs, flat)


@dataclass
class LossParts:
    total: Tensor
    policy: float
    value: float
    entropy: float = 0.0
    clip_frac: float = 0.0


def alphatransit_loss(net: PolicyValueNet, encodings, masks, pis, z_targets) -> LossParts:
    """Mean over the batch of cross-entropy to the search policy plus squared value error."""
    flat_pi = np.concatenate([np.asarray(p, dtype=np.float64) for p in pis])
    flat_mask = np.concatenate([np.asarray(m, dtype=bool) for m in masks])
    if (flat_pi[~flat_mask] != 0).any():
        raise ValueError("policy target puts mass outside the candidate set")
    out = net.forward(encodings)
    G = out.batch.n_graphs
    logp = _batch_log_policy(out, masks)
    ce = ad.segment_sum(logp * (-flat_pi), out.batch.graph_of, G)
    diff = out.value - np.asarray(z_targets, dtype=np.float64)
    vloss = diff * diff
    total = (ce + vloss).mean()
    return LossParts(total, float(ce.data.mean()), float(vloss.data.mean()))


def ppo_loss(net: PolicyValueNet, encodings, masks, actions, old_logp, advantages, returns,
             clip_eps: float = 0.2, value_coef: float = 0.5, entropy_coef: float = 0.01) -> LossParts:
    """Negative clipped surrogate plus weighted value error minus weighted entropy."""
    out = net.forward(encodings)
    b = out.batch
    logp = _batch_log_policy(out, masks)
    idx = b.offsets[:-1] + np.asarray(actions, dtype=np.int64)
    logp_a = ad.take(logp, idx)
    ratio = ad.exp(logp_a - np.asarray(old_logp, dtype=np.float64))
    adv = np.asarray(advantages, dtype=np.float64)
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)
    ent = -ad.segment_sum(ad.exp(logp) * logp, b.graph_of, b.n_graphs)
    diff = out.value - np.asarray(returns, dtype=np.float64)
    pol = -surr.mean()
    vl = (diff * diff).mean()
    el = ent.mean()
    total = pol + value_coef * vl - entropy_coef * el
    clipped = np.abs(ratio.data - 1) > clip_eps
    return LossParts(total, float(pol.data), float(vl.data), float(el.data), float(clipped.mean()))


# --- checkpoint files ----------------------------------------------------------------------


def save_checkpoint(path, net: PolicyValueNet, optimizer: ad.Adam | None = None, meta: dict | None = None) -> None:
    """Write an ``.npz`` container: ``param/*``, optional ``adam_m/*``, ``adam_v/*`` and a JSON ``meta`` string."""
    arrays = {f"param/{k}": t.data for k, t in net.params.items()}
    info = {"version": CHECKPOINT_VERSION, "net": asdict(net.cfg), "adam_t": 0, **(meta or {})}
    if optimizer is not None:
        names = list(net.params)
        for k, m, v in zip(names, optimizer.m, optimizer.v):
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = v
        info["adam_t"] = optimizer.t
        info["lr"] = optimizer.lr
    arrays["meta"] = np.array(json.dumps(info, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[PolicyValueNet, dict, dict | None]:
    """Return ``(net, meta, optimizer_state)``; optimizer state is ``{"m", "v", "t"}`` or ``None``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        net = PolicyValueNet(NetConfig(**meta["net"]))
        net.set_flat({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        opt = None
        if any(k.startswith("adam_m/") for k in z.files):
            opt = {
                "m": [z[f"adam_m/{k}"] for k in net.params],
                "v": [z[f"adam_v/{k}"] for k in net.params],
                "t": meta["adam_t"],
            }
    return net, meta, opt


def restore_optimizer(opt: ad.Adam, state: dict | None) -> None:
    if state is None:
        return
    opt.m = [np.array(a) for a in state["m"]]
    opt.v = [np.array(a) for a in state["v"]]
    opt.t = int(state["t"])
