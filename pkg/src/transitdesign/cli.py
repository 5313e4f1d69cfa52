"""Command-line entry point: ``transitdesign <command> ...``.

Every command writes into an output directory (``--out``, or a
subdirectory of ``$TRANSITDESIGN_OUT``, default ``runs/``) together with the
fully resolved configuration it ran with. Failures print one JSON object on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import HEURISTICS, GAConfig, ga_optimize, heuristic_design, pure_mcts_design
from .citygen import geometric_city, grid_city
from .designenv import DesignEnv, EnvConfig, validate_design
from .learner import (
    AlphaTransitTrainer, PPOConfig, PPOTrainer, Problem, TrainConfig, c_puct_for, collect_episode,
    sample_policy_design,
)
from .netmodel import Network, estimate_search_space, load_network, save_network
from .policy import NetConfig, load_checkpoint
from .search import SearchConfig
from .transitsim import METRIC_FIELDS, SimConfig, overlap_ratio

METHODS = ("alphatransit", "ppo", "pure-mcts", "ga", *HEURISTICS, "real-routes")
LEARNED = ("alphatransit", "ppo")
DESIGN_FORMAT = "transitdesign.design/1"
PPO_PRESET_KEYS = ("lr", "clip", "epochs", "batch_size", "entropy_coef", "lr_anneal")
PROVENANCE_KEYS = ("command", "version", "network")  # echoed configs can be fed back as --config
CSV_NAMES = ("service_rate", "wait", "transfer", "journey", "route_eff", "fleet", "utilization")

DEFAULTS = {
    "alpha": 1.0,
    "seeds": [0],
    "sim": asdict(SimConfig()),
    "env": {"routes": 16, "max_len": 14},
    "search": {k: v for k, v in asdict(SearchConfig()).items() if k != "temperature"},
    "net": asdict(NetConfig()),
    "train": {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig) if f.name not in ("search", "net")},
    # preset-controlled PPO keys stay None unless overridden; the modal split picks the preset
    "ppo": {f.name: (None if f.name in PPO_PRESET_KEYS else getattr(PPOConfig(), f.name))
            for f in fields(PPOConfig) if f.name != "net"},
    "ga": asdict(GAConfig()),
    "eval_tau": 0.1,
}


class CliError(Exception):
    """A user-facing failure with a machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# --- configuration -------------------------------------------------------------------------


def deep_merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if not path and k in PROVENANCE_KEYS:
            continue
        if k not in out:
            raise CliError("config", f"unknown config key '{path}{k}'")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(out[k], v, f"{path}{k}.")
        elif isinstance(out[k], dict) and not isinstance(v, dict):
            raise CliError("config", f"config key '{path}{k}' must be an object")
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags; validated before any work."""
    cfg = copy.deepcopy(DEFAULTS)
    file_doc = {}
    if getattr(args, "config", None):
        try:
            file_doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError("config", f"cannot read config {args.config}: {err}") from None
        if not isinstance(file_doc, dict):
            raise CliError("config", f"{args.config} must hold a JSON object")
        cfg = deep_merge(cfg, file_doc)
    flags = {
        "alpha": ("alpha",), "seeds": ("seeds",), "routes": ("env", "routes"), "max_len": ("env", "max_len"),
        "n_iter": ("search", "n_iter"), "c_puct": ("search", "c_puct"), "horizon": ("sim", "horizon"),
        "steps": ("train", "env_steps"), "workers": ("train", "workers"), "generations": ("ga", "generations"),
        "population": ("ga", "population"),
    }
    for attr, path in flags.items():
        v = getattr(args, attr, None)
        if v is None:
            continue
        d = cfg
        for p in path[:-1]:
            d = d[p]
        d[path[-1]] = v
    if getattr(args, "steps", None) is not None:
        cfg["ppo"]["env_steps"] = args.steps
    if getattr(args, "c_puct", None) is None and "c_puct" not in file_doc.get("search", {}):
        cfg["search"]["c_puct"] = c_puct_for(cfg["alpha"])
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        if not 0 <= cfg["alpha"] <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not cfg["seeds"]:
            raise ValueError("at least one seed is required")
        sim_config(cfg).validate()
        env_config(cfg).validate()
        search_config(cfg).validate()
        train_config(cfg).validate()
        GAConfig(**cfg["ga"]).validate()
        ppo_config(cfg)
        if cfg["eval_tau"] <= 0:
            raise ValueError("eval_tau must be positive")
    except (TypeError, ValueError) as err:
        raise CliError("config", str(err)) from None


def sim_config(cfg) -> SimConfig:
    return SimConfig(**cfg["sim"])


def env_config(cfg) -> EnvConfig:
    return EnvConfig(**cfg["env"], alpha=cfg["alpha"])


def search_config(cfg, noise: bool = False) -> SearchConfig:
    return SearchConfig(**{**cfg["search"], "add_noise": noise and cfg["search"]["add_noise"]})


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**cfg["train"], search=SearchConfig(**cfg["search"]), net=NetConfig(**cfg["net"]))


def ppo_config(cfg) -> PPOConfig:
    given = {k: v for k, v in cfg["ppo"].items() if v is not None}
    return PPOConfig.for_alpha(cfg["alpha"], **given, net=NetConfig(**cfg["net"]))


def output_dir(args, name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(os.environ.get("TRANSITDESIGN_OUT", "runs")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def echo_config(out: Path, cfg: dict, args) -> None:
    write_json(out / "config.json", {"command": args.command, "version": __version__, **cfg,
                                     "network": getattr(args, "network", None)})


# --- design construction ----------------------------------------------------------------------------------


def open_network(path, alpha) -> Network:
    if not path:
        raise CliError("usage", "--network is required")
    return load_network(path, alpha=alpha)


def make_env(net: Network, cfg: dict) -> DesignEnv:
    return DesignEnv(net.graph, net.demand.with_alpha(cfg["alpha"]), env_config(cfg), sim_config(cfg))


def build_design(method: str, net: Network, env: DesignEnv, cfg: dict, seed: int, checkpoint=None):
    """Route tuple produced by ``method`` for one seed."""
    rng = np.random.default_rng(seed)
    if method in LEARNED:
        if not checkpoint:
            raise CliError("missing-checkpoint",
                           f"method '{method}' needs --checkpoint (train one with `transitdesign train`)")
        model, meta, _ = load_checkpoint(checkpoint)
        if meta.get("kind") != method:
            raise CliError("checkpoint", f"{checkpoint} holds a '{meta.get('kind')}' model, not '{method}'")
        if method == "alphatransit":
            ep = collect_episode(env, model, search_config(cfg), cfg["eval_tau"], rng, seed)
            return ep.routes
        state, _ = sample_policy_design(env, model, rng, tau=cfg["eval_tau"])
        return state.completed
    if method == "pure-mcts":
        ep, _ = pure_mcts_design(env, search_config(cfg), seed=seed, tau=cfg["eval_tau"])
        return ep.routes
    if method == "ga":
        warm = tuple(tuple(r) for r in net.real_routes) if net.real_routes else None
        return ga_optimize(env, GAConfig(**cfg["ga"]), seed=seed, warm_start=warm, sim_seed=seed).best
    if method in HEURISTICS:
        return heuristic_design(method, env, rng)
    if method == "real-routes":
        if not net.real_routes:
            raise CliError("no-real-routes", "the network file carries no 'real_routes'")
        return tuple(tuple(int(v) for v in r) for r in net.real_routes)
    raise CliError("usage", f"unknown method '{method}'; choose from {', '.join(METHODS)}")


def design_doc(method, routes, env: DesignEnv, seed) -> dict:
    return {"format": DESIGN_FORMAT, "method": method, "seed": seed, "hub": env.hub,
            "max_len": env.cfg.max_len, "routes": [list(r) for r in routes]}


def load_design(path, graph) -> dict:
    """Read a design file and check it against the road graph."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CliError("design", f"cannot read design {path}: {err}") from None
    if doc.get("format") != DESIGN_FORMAT or "routes" not in doc:
        raise CliError("design", f"{path} is not a design file")
    hub = None if doc.get("method") == "real-routes" else doc.get("hub")
    try:
        validate_design(graph, doc["routes"], hub=hub, max_len=None if hub is None else doc.get("max_len"))
    except ValueError as err:
        raise CliError("design", f"{path}: {err}") from None
    return doc


def structure(graph, routes) -> dict:
    nodes = {v for r in routes for v in r}
    return {"node_coverage_pct": 100.0 * len(nodes) / graph.n, "overlap_pct": 100.0 * overlap_ratio(routes),
            "total_km": sum(graph.route_length(r) for r in routes) / 1000.0}


def evaluation_record(env: DesignEnv, routes, seed: int) -> dict:
    ev = env.evaluate(routes, seed=seed)
    return {"seed": seed, "reward": ev.reward, "terms": asdict(ev.terms), "metrics": asdict(ev.metrics),
            "frequencies": ev.frequencies, "fleet": ev.fleet, "structure": structure(env.graph, routes),
            "report": ev.report.to_dict()}


# --- commands ------------------------------------------------------------------------------------------------


def cmd_gen(args) -> dict:
    if (args.grid is None) == (args.geometric is None):
        raise CliError("usage", "give exactly one of --grid ROWS COLS or --geometric NODES EDGES")
    try:
        if args.grid:
            net = grid_city(*args.grid, spacing=args.spacing, demand_pairs=args.demand_pairs,
                            total_rate=args.rate, seed=args.seed)
        else:
            net = geometric_city(*args.geometric, demand_pairs=args.demand_pairs, total_rate=args.rate,
                                 seed=args.seed)
    except ValueError as err:
        raise CliError("invalid-parameters", str(err)) from None
    path = Path(args.output) if args.output else output_dir(args, "gen") / "network.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_network(net, path)
    return {"network": str(path), "nodes": net.graph.n, "edges": net.graph.n_edges,
            "od_pairs": len(net.demand.entries)}


def cmd_design(args) -> dict:
    cfg = resolve_config(args)
    net = open_network(args.network, cfg["alpha"])
    env = make_env(net, cfg)
    out = output_dir(args, f"design-{args.method}")
    echo_config(out, cfg, args)
    written = []
    for seed in cfg["seeds"]:
        routes = build_design(args.method, net, env, cfg, seed, args.checkpoint)
        doc = design_doc(args.method, routes, env, seed)
        write_json(out / f"design_seed{seed}.json", doc)
        write_json(out / f"report_seed{seed}.json", evaluation_record(env, routes, seed))
        written.append({"seed": seed, "routes": doc["routes"]})
    return {"out": str(out), "designs": written}


def cmd_evaluate(args) -> dict:
    cfg = resolve_config(args)
    net = open_network(args.network, cfg["alpha"])
    env = make_env(net, cfg)
    doc = load_design(args.design, net.graph)
    out = output_dir(args, "evaluate")
    echo_config(out, cfg, args)
    recs = [evaluation_record(env, doc["routes"], s) for s in cfg["seeds"]]
    write_json(out / "evaluation.json", {"design": str(args.design), "runs": recs})
    return {"out": str(out), "rewards": [r["reward"] for r in recs]}


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    net = open_network(args.network, cfg["alpha"])
    out = output_dir(args, f"train-{args.learner}")
    echo_config(out, cfg, args)
    problem = Problem(net.graph, net.demand.with_alpha(cfg["alpha"]), env_config(cfg), sim_config(cfg))
    if args.learner == "alphatransit":
        if args.resume:
            trainer = AlphaTransitTrainer.resume(problem, args.resume, out, env_steps=cfg["train"]["env_steps"])
        else:
            trainer = AlphaTransitTrainer(problem, train_config(cfg), out)
    else:
        if args.resume:
            raise CliError("usage", "--resume is only supported for the alphatransit learner")
        trainer = PPOTrainer(problem.make_env(), ppo_config(cfg), out)
    hist = trainer.run()
    summary = {"out": str(out), "iterations": trainer.iteration, "env_steps": trainer.env_steps,
               "final_mean_z": hist[-1]["mean_z"] if hist else None,
               "checkpoint": str(out / "checkpoint_final.npz")}
    write_json(out / "summary.json", summary)
    return summary


def _mean_std(xs):
    xs = [float(x) for x in xs]
    return float(np.mean(xs)), (float(np.std(xs, ddof=1)) if len(xs) >= 2 else None)


def cmd_compare(args) -> dict:
    cfg = resolve_config(args)
    net = open_network(args.network, cfg["alpha"])
    env = make_env(net, cfg)
    out = output_dir(args, "compare")
    echo_config(out, cfg, args)
    ckpts = dict(c.split("=", 1) for c in (args.checkpoint or []))
    report, rows = {"methods": {}, "failures": {}}, []
    for method in args.methods:
        try:
            runs = []
            for seed in cfg["seeds"]:
                routes = build_design(method, net, env, cfg, seed, ckpts.get(method))
                runs.append(evaluation_record(env, routes, seed))
        except Exception as err:  # one method failing must not stop the comparison
            report["failures"][method] = f"{type(err).__name__}: {err}"
            continue
        summary = {}
        for group in ("metrics", "terms", "structure"):
            summary[group] = {k: dict(zip(("mean", "std"), _mean_std([r[group][k] for r in runs])))
                              for k in runs[0][group]}
        summary["reward"] = dict(zip(("mean", "std"), _mean_std([r["reward"] for r in runs])))
        report["methods"][method] = summary
        row = {"method": method}
        for name, field_ in zip(CSV_NAMES, METRIC_FIELDS):
            m = summary["metrics"][field_]
            row[f"{name}_mean"] = m["mean"]
            row[f"{name}_std"] = "" if m["std"] is None else m["std"]
        rows.append(row)
    write_json(out / "comparison.json", report)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method"] + [f"{n}_{s}" for n in CSV_NAMES for s in ("mean", "std")])
        w.writeheader()
        w.writerows(rows)
    return {"out": str(out), "methods": list(report["methods"]), "failures": report["failures"]}


def cmd_inspect(args) -> dict:
    """Per-decision search trace: candidates, priors, visit counts, values and the move taken."""
    cfg = resolve_config(args)
    net = open_network(args.network, cfg["alpha"])
    env = make_env(net, cfg)
    seed = cfg["seeds"][0]
    rng = np.random.default_rng(seed)
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
        ep = collect_episode(env, model, search_config(cfg), cfg["eval_tau"], rng, seed)
        source = "alphatransit"
    else:
        ep, _ = pure_mcts_design(env, search_config(cfg), seed=seed, tau=cfg["eval_tau"])
        source = "pure-mcts"
    out = output_dir(args, "inspect")
    echo_config(out, cfg, args)
    steps = [{"step": i, "routes_done": len(s.completed), "current": list(s.current), **t}
             for i, (s, t) in enumerate(zip(ep.states, ep.trace))]
    write_json(out / "trace.json", {"source": source, "seed": seed, "reward": ep.z,
                                    "routes": [list(r) for r in ep.routes], "decisions": steps})
    return {"out": str(out), "decisions": len(steps), "reward": ep.z}


def cmd_space(args) -> dict:
    if args.network:
        g = load_network(args.network).graph
        n, e = g.n, g.n_edges
    else:
        if args.nodes is None or args.edges is None:
            raise CliError("usage", "give --network or both --nodes and --edges")
        n, e = args.nodes, args.edges
    try:
        per_route, total = estimate_search_space(n, e, args.routes, args.route_edges, hub_start=not args.random_start)
    except ValueError as err:
        raise CliError("invalid-parameters", str(err)) from None
    return {"nodes": n, "edges": e, "routes": args.routes, "route_edges": args.route_edges,
            "hub_start": not args.random_start, "per_route": per_route, "log10_total": total}


# --- parser ------------------------------------------------------------------------------------------------------


def _common(p, seeds=True):
    p.add_argument("--network", help="network JSON file")
    p.add_argument("--config", help="JSON config file layered over the defaults")
    p.add_argument("--out", help="output directory (default: $TRANSITDESIGN_OUT/<command>)")
    p.add_argument("--alpha", type=float, help="transit modal split in [0, 1]")
    p.add_argument("--routes", type=int, help="number of routes K")
    p.add_argument("--max-len", dest="max_len", type=int, help="maximum nodes per route")
    p.add_argument("--n-iter", dest="n_iter", type=int, help="search simulations per decision")
    p.add_argument("--c-puct", dest="c_puct", type=float)
    p.add_argument("--horizon", type=int, help="simulation horizon in steps")
    if seeds:
        p.add_argument("--seeds", type=int, nargs="+")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="transitdesign", description="Hub-anchored bus network design and evaluation.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic city")
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    p.add_argument("--geometric", type=int, nargs=2, metavar=("NODES", "EDGES"))
    p.add_argument("--spacing", type=float, default=800.0)
    p.add_argument("--demand-pairs", dest="demand_pairs", type=int)
    p.add_argument("--rate", type=float, default=600.0, help="total trips per hour")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="output file (default: $TRANSITDESIGN_OUT/gen/network.json)")
    p.add_argument("--out", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("design", help="build a design with one method and evaluate it")
    _common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--checkpoint")
    p.add_argument("--generations", type=int)
    p.add_argument("--population", type=int)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("train", help="train a learned designer")
    _common(p, seeds=False)
    p.add_argument("--learner", choices=LEARNED, default="alphatransit")
    p.add_argument("--steps", type=int, help="environment-step budget")
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="simulate a saved design")
    _common(p)
    p.add_argument("--design", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="evaluate several methods over several seeds")
    _common(p)
    p.add_argument("--methods", nargs="+", required=True, choices=METHODS)
    p.add_argument("--checkpoint", action="append", metavar="METHOD=PATH")
    p.add_argument("--generations", type=int)
    p.add_argument("--population", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="write the per-decision search trace of one design episode")
    _common(p)
    p.add_argument("--checkpoint", help="alphatransit checkpoint (default: rollout search)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("space", help="estimate the size of the design space")
    p.add_argument("--network")
    p.add_argument("--nodes", type=int)
    p.add_argument("--edges", type=int)
    p.add_argument("--routes", type=int, default=16)
    p.add_argument("--route-edges", dest="route_edges", type=int, default=13)
    p.add_argument("--random-start", action="store_true")
    p.set_defaults(func=cmd_space)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except CliError as err:
        print(json.dumps({"error": err.kind, "message": str(err)}), file=sys.stderr)
        return 2
    except Exception as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
