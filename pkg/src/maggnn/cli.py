"""Command-line harness: gen | train | eval | bench | oracle.

Every command that writes files does so into a fresh run directory holding a
``manifest.json`` and, once finished, a ``COMPLETE`` marker. Relative output
paths resolve under ``$MAGGNN_RUN_ROOT`` (default: the current directory).

Config precedence for ``train``: built-in defaults < TOML file < CLI flags.
Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import datasets as D
from .agent import AgentConfig, QNetworkModel, load_agent, random_state, rollout_batch, save_agent
from .errors import BudgetError, CheckpointError, ConfigError, MagGnnError
from .graph import Graph, erdos_renyi, generate_csl, generate_cycle_union, generate_srg_pair, graph_from_dict
from .nn import autodiff as ad
from .nn.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .subgraph import PredictionModel, full_subgraph_gnn, predict
from .training import EnvConfig, RunConfig, evaluate, train, validate_run_config
from .wl import DEFAULT_BUDGET, brute_force_discriminative, distinguishable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RUN_ROOT_ENV = "MAGGNN_RUN_ROOT"
MARKER = "COMPLETE"
BUILTIN_DATASETS = ("csl", "supergraph", "srg-pair", "exp-like", "cycles")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def resolve_out(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(os.environ.get(RUN_ROOT_ENV, ".")) / p
    return p


def prepare_run_dir(path: str, force: bool) -> Path:
    out = resolve_out(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


class Run:
    """Manifest bookkeeping for one command writing into one directory."""

    def __init__(self, out: Path, command: str, config: dict, seed: int, config_path: str | None = None):
        self.out = out
        h = config_hash({"command": command, "config": config})
        self.manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "config_path": config_path,
            "config_hash": h,
            "run_id": h[:12],
            "seed": seed,
            "artifacts": [],
            "started": _now(),
        }
        self._write()

    def artifact(self, name: str, *files: str) -> Path:
        """Register ``name`` (or, for checkpoints, the listed ``files``) and return its path."""
        self.manifest["artifacts"].extend(files or [name])
        return self.out / name

    def _write(self):
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def finish(self):
        self.manifest["finished"] = _now()
        self._write()
        (self.out / MARKER).write_text(self.manifest["run_id"] + "\n")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# datasets

def build_dataset(name: str, seed: int = 0, **kw) -> D.Dataset:
    if name == "csl":
        return D.csl_dataset(n=kw.get("n") or 41, per_class=kw.get("per_class") or 15, seed=seed)
    if name == "supergraph":
        return D.supergraph_dataset(n=kw.get("n") or 3, num_positive=kw.get("num_positive") or 100,
                                    num_negative=kw.get("num_negative") or 100, seed=seed)
    if name == "srg-pair":
        return D.srg_pair_dataset(copies=kw.get("copies") or 1, seed=seed)
    if name == "exp-like":
        return D.exp_like_dataset(seed=seed)
    if name == "cycles":
        return D.cycle_dataset(num_graphs=kw.get("num_graphs") or 200, n=kw.get("n") or 18, seed=seed)
    raise UsageError(f"unknown dataset {name!r}; expected a directory or one of {', '.join(BUILTIN_DATASETS)}")


def load_dataset(spec: str, seed: int = 0) -> D.Dataset:
    """A built-in dataset name (default sizes), or a ``gen`` output directory."""
    if spec in BUILTIN_DATASETS:
        return build_dataset(spec, seed)
    p = Path(spec)
    if not p.is_dir():
        p = resolve_out(spec)
    info_path = p / "dataset.json"
    if not info_path.exists():
        raise UsageError(f"{spec!r} is neither a dataset directory nor a built-in dataset")
    info = json.loads(info_path.read_text())
    return D.read_jsonl(p / "graphs.jsonl", info["name"], info["task"], info["num_outputs"])


def dataset_summary(ds: D.Dataset) -> dict:
    splits = {s: len(ds.split(s)) for s in D.SPLITS}
    return {"name": ds.name, "task": ds.task, "num_outputs": ds.num_outputs, "num_records": len(ds),
            "splits": splits, "class_counts": {str(k): v for k, v in ds.class_counts().items()}}


def cmd_gen(args) -> int:
    ds = build_dataset(args.dataset, args.seed, n=args.n, per_class=args.per_class, num_positive=args.num_positive,
                       num_negative=args.num_negative, num_graphs=args.num_graphs, copies=args.copies)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out", "force")}
    out = prepare_run_dir(args.out, args.force)
    run = Run(out, "gen", cfg, args.seed)
    D.write_jsonl(ds, run.artifact("graphs.jsonl"))
    summary = dataset_summary(ds)
    write_json(run.artifact("dataset.json"), summary)
    run.manifest["class_counts"] = summary["class_counts"]
    run.finish()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# train / eval

RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - {"agent", "env"}
AGENT_KEYS = {f.name for f in dataclasses.fields(AgentConfig)}
ENV_KEYS = {f.name for f in dataclasses.fields(EnvConfig)}


def read_toml_config(path: str) -> dict:
    """Sections ``[run]``, ``[agent]``, ``[env]``; run keys may also sit at top level."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    out = {"agent": {}, "env": {}}
    problems = []
    for key, val in raw.items():
        if key in ("agent", "env") and isinstance(val, dict):
            allowed = AGENT_KEYS if key == "agent" else ENV_KEYS
            for k2, v2 in val.items():
                if k2 not in allowed:
                    problems.append(f"{key}.{k2}: unknown key")
                out[key][k2] = v2
        elif key == "run" and isinstance(val, dict):
            for k2, v2 in val.items():
                if k2 not in RUN_KEYS:
                    problems.append(f"run.{k2}: unknown key")
                out[k2] = v2
        elif key in RUN_KEYS:
            out[key] = val
        else:
            problems.append(f"{key}: unknown key")
    if problems:
        raise ConfigError(problems)
    return out


TRAIN_FLAGS = {
    # flag dest -> (section, key)
    "paradigm": (None, "paradigm"), "data": (None, "dataset"), "epochs": (None, "epochs"),
    "batch_size": (None, "batch_size"), "agent_steps": (None, "agent_steps"), "seed": (None, "seed"),
    "prefill": (None, "prefill"), "collect_graphs": (None, "collect_graphs"), "patience": (None, "patience"),
    "eval_repeats": (None, "eval_repeats"), "pretrained_agent": (None, "pretrained_agent"),
    "m": ("agent", "m"), "k": ("agent", "k"), "t": ("agent", "t"), "gamma": ("agent", "gamma"),
    "sync_rate": ("agent", "sync_rate"), "capacity": ("agent", "capacity"),
    "agent_batch_size": ("agent", "batch_size"), "agent_lr": ("agent", "lr"),
    "agent_hidden_dim": ("agent", "hidden_dim"), "agent_layers": ("agent", "num_layers"),
    "hidden_dim": ("env", "hidden_dim"), "num_layers": ("env", "num_layers"), "lr": ("env", "lr"),
    "jumping_knowledge": ("env", "jumping_knowledge"), "norm": ("env", "norm"),
    "head_norm": ("env", "head_norm"), "calibrate": ("env", "calibrate"), "agent_norm": ("agent", "norm"),
}


def resolve_train_config(args) -> RunConfig:
    merged = {"agent": {}, "env": {}}
    if args.config:
        merged = read_toml_config(args.config)
    for dest, (section, key) in TRAIN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        if section is None:
            merged[key] = val
        else:
            merged[section][key] = val
    problems = []
    try:
        agent = AgentConfig(**merged.pop("agent"))
    except (MagGnnError, TypeError) as exc:
        problems.extend(f"agent: {p}" for p in str(exc).split("; "))
        agent = AgentConfig()
    try:
        env = EnvConfig(**merged.pop("env"))
    except TypeError as exc:
        problems.append(f"env: {exc}")
        env = EnvConfig()
    # collect run-level problems without tripping the dataclass validator first
    probe = RunConfig()
    for key, val in merged.items():
        setattr(probe, key, val)
    probe.env = env
    problems.extend(validate_run_config(probe))
    if env.jumping_knowledge not in ("none", "sum"):
        problems.append(f"env.jumping_knowledge: {env.jumping_knowledge!r} is not one of none, sum")
    if problems:
        raise ConfigError(problems)
    return RunConfig(agent=agent, env=env, **merged)


def save_env(path: Path, model: PredictionModel) -> None:
    save_checkpoint(path, {"env": model.store}, {"model": model.config()})


def load_env(path: Path) -> PredictionModel:
    meta = read_manifest(path)["meta"]
    model = PredictionModel.from_config(meta["model"])
    load_checkpoint(path, {"env": model.store})
    return model


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    ds = load_dataset(cfg.dataset, cfg.seed)
    qnet = None
    if cfg.paradigm == "pre":
        qnet, _ = load_agent(cfg.pretrained_agent)
    out = prepare_run_dir(args.out, args.force)
    run = Run(out, "train", cfg.to_dict(), cfg.seed, args.config)
    write_json(run.artifact("config.json"), cfg.to_dict())
    res = train(cfg, ds, run.artifact("metrics.csv"), qnet=qnet)
    save_env(run.artifact("env_model", "env_model.json", "env_model.bin"), res.env_model)
    if res.qnet is not None and cfg.paradigm != "pre":
        save_agent(run.artifact("agent", "agent.json", "agent.bin", "agent.agent.json"), res.qnet,
                   {"counters": res.counters, "paradigm": cfg.paradigm})
    write_json(run.artifact("counters.json"), res.counters)
    run.finish()
    print(json.dumps({"run_dir": str(out), "run_id": run.manifest["run_id"], "counters": res.counters},
                     sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = resolve_out(args.run)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise CheckpointError(f"missing run config {cfg_path}")
    cfg = RunConfig.from_dict(json.loads(cfg_path.read_text()))
    env = load_env(run_dir / "env_model")
    qnet = None
    steps = cfg.agent.t if args.steps is None else args.steps
    if steps > 0:
        agent_path = Path(cfg.pretrained_agent) if cfg.paradigm == "pre" else run_dir / "agent"
        qnet, _ = load_agent(agent_path)
    ds = load_dataset(args.data or cfg.dataset, cfg.seed)
    instances = ds.split("test") or ds.instances
    repeats = args.repeats if args.repeats is not None else cfg.eval_repeats
    report = evaluate(env, qnet, instances, repeats=repeats, t=steps, m=cfg.agent.m, seed=args.seed)
    per_graph = report.pop("per_graph")
    report["num_graphs"] = len(instances)
    if args.out:
        out = prepare_run_dir(args.out, args.force)
        run = Run(out, "eval", {"run": str(run_dir), "repeats": repeats, "steps": steps,
                                "seed": args.seed, "data": args.data}, args.seed)
        write_json(run.artifact("report.json"), report)
        if args.per_graph:
            with run.artifact("per_graph.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "target", report["metric"]])
                for i, (d, s) in enumerate(zip(instances, per_graph)):
                    w.writerow([i, json.dumps(np.asarray(d.target).tolist()), repr(float(s))])
        run.finish()
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# bench

def bench_report(num_graphs: int, n: int, k: int, m: int, t: int, seed: int, p: float = 0.3,
                 hidden_dim: int = 16, num_layers: int = 2, budget: int = DEFAULT_BUDGET) -> tuple[dict, dict]:
    """Encoder invocation counts of one MAG-GNN prediction versus full k-tuple enumeration.

    Returns (report, wall times); the report is deterministic for a seed.
    """
    env = PredictionModel.create(1, k, D.TASK_GRAPH_CLASS, 2, hidden_dim, num_layers, seed=seed)
    qnet = QNetworkModel(1, k, hidden_dim, num_layers, seed=seed + 1, zero_head=False)
    rng = np.random.default_rng(seed)
    rows, timing = [], []
    partial = False
    for i in range(num_graphs):
        g = erdos_renyi(n, p, seed * 1000 + i)
        e0, q0 = env.encoder.calls, qnet.calls
        tic = time.perf_counter()
        state = random_state(g, m, k, rng)
        finals, _ = rollout_batch(qnet, None, None, [state], t, 0.0, rng, with_rewards=False)
        with ad.no_grad():
            predict(env, [g], [finals[0].tuples])
        mag_time = time.perf_counter() - tic
        row = {"graph": i, "num_nodes": n, "mag_env_calls": env.encoder.calls - e0, "mag_q_calls": qnet.calls - q0,
               "expected_env_calls": m, "expected_q_calls": m * t, "expected_enum_calls": n ** k}
        tic = time.perf_counter()
        try:
            with ad.no_grad():
                _, enum_calls = full_subgraph_gnn(env, g, k, budget=budget)
            row["enum_calls"] = enum_calls
        except BudgetError:
            row["enum_calls"] = None
            partial = True
        timing.append({"graph": i, "mag_seconds": mag_time, "enum_seconds": time.perf_counter() - tic})
        row["counts_match"] = (row["mag_env_calls"] == m and row["mag_q_calls"] == m * t
                               and row["enum_calls"] in (None, n ** k))
        rows.append(row)
    c = 1
    report = {
        "config": {"graphs": num_graphs, "n": n, "k": k, "m": m, "t": t, "seed": seed, "p": p, "budget": budget},
        "per_step_constant": c,
        "enumeration_calls": n ** k,
        "mag_q_calls": m * t,
        "mag_env_calls": m,
        "ratio": (n ** k) / (m * t * c) if m * t else None,
        "rows": rows,
        "all_counts_match": all(r["counts_match"] for r in rows),
        "partial": partial,
    }
    return report, {"rows": timing}


def cmd_bench(args) -> int:
    report, timing = bench_report(args.graphs, args.n, args.k, args.m, args.t, args.seed, args.p,
                                  budget=args.budget)
    if args.out:
        out = prepare_run_dir(args.out, args.force)
        run = Run(out, "bench", report["config"], args.seed)
        write_json(run.artifact("bench.json"), report)
        write_json(run.artifact("timing.json"), timing)
        run.finish()
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["all_counts_match"] else EXIT_RUNTIME


# oracle

def oracle_pair(name: str) -> tuple[Graph, Graph]:
    if name == "srg":
        return generate_srg_pair()
    if name == "cycles":
        return generate_cycle_union((3, 6)), generate_cycle_union((3, 3, 3))
    if name == "csl8":
        return generate_csl(8, 2), generate_csl(8, 3)
    raise UsageError(f"unknown pair {name!r}")


def read_graph(path: str) -> Graph:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise UsageError(f"graph file {path} not found") from exc
    return graph_from_dict(json.loads(text))[0]


def oracle_report(g1: Graph, g2: Graph, ks, limit: int = 20, budget: int = DEFAULT_BUDGET) -> dict:
    verdict = {True: "distinguishable", False: "indistinguishable"}
    report = {"unmarked": verdict[distinguishable(g1, g2)], "witnesses": {}, "num_witnesses": {}}
    for k in ks:
        found = sorted(brute_force_discriminative(g1, g2, k, budget=budget))
        report[f"k{k}"] = verdict[bool(found)]
        report["num_witnesses"][f"k{k}"] = len(found)
        report["witnesses"][f"k{k}"] = [list(t) for t in found[:limit]]
    return report


def cmd_oracle(args) -> int:
    if args.graph_a:
        g1 = read_graph(args.graph_a)
        g2 = read_graph(args.graph_b) if args.graph_b else g1
        pair = "files"
    else:
        g1, g2 = oracle_pair(args.pair)
        pair = args.pair
    report = oracle_report(g1, g2, args.k, args.limit, args.budget)
    report["pair"] = pair
    if args.out:
        out = prepare_run_dir(args.out, args.force)
        run = Run(out, "oracle", {"pair": pair, "graph_a": args.graph_a, "graph_b": args.graph_b,
                                  "k": args.k, "limit": args.limit}, 0)
        write_json(run.artifact("oracle.json"), report)
        run.finish()
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maggnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset as newline-delimited graph JSON")
    g.add_argument("--dataset", required=True, choices=BUILTIN_DATASETS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, help="CSL ring size, super-graph order or cycle-task graph size")
    g.add_argument("--per-class", type=int)
    g.add_argument("--num-positive", type=int)
    g.add_argument("--num-negative", type=int)
    g.add_argument("--num-graphs", type=int)
    g.add_argument("--copies", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train with the ord, simul or pre paradigm")
    t.add_argument("--config", help="TOML file; flags given here override it")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--paradigm")
    t.add_argument("--data", help="dataset directory from gen, or a built-in name")
    ints = ("epochs", "batch-size", "agent-steps", "seed", "prefill", "collect-graphs", "patience",
            "eval-repeats", "m", "k", "t", "sync-rate", "capacity", "agent-batch-size", "agent-hidden-dim",
            "agent-layers", "hidden-dim", "num-layers", "calibrate")
    for name in ints:
        t.add_argument(f"--{name}", type=int)
    for name in ("gamma", "agent-lr", "lr"):
        t.add_argument(f"--{name}", type=float)
    t.add_argument("--jumping-knowledge")
    t.add_argument("--norm")
    t.add_argument("--head-norm")
    t.add_argument("--agent-norm")
    t.add_argument("--pretrained-agent", help="agent checkpoint path (pre paradigm)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a finished training run")
    e.add_argument("--run", required=True)
    e.add_argument("--data")
    e.add_argument("--repeats", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--per-graph", action="store_true", help="also write per_graph.csv (needs --out)")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="encoder-call accounting: MAG-GNN versus enumeration")
    b.add_argument("--graphs", type=int, default=5)
    b.add_argument("--n", type=int, default=16)
    b.add_argument("--k", type=int, default=2)
    b.add_argument("--m", type=int, default=2)
    b.add_argument("--t", type=int, default=2)
    b.add_argument("--p", type=float, default=0.3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    b.add_argument("--out")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oracle", help="1-WL distinguishability of a graph pair, plain and marked")
    o.add_argument("--pair", default="srg", choices=("srg", "cycles", "csl8"))
    o.add_argument("--graph-a", help="graph JSON file (overrides --pair)")
    o.add_argument("--graph-b", help="second graph JSON file; defaults to graph-a")
    o.add_argument("--k", type=int, nargs="+", default=[1, 2])
    o.add_argument("--limit", type=int, default=20, help="witness tuples to list per k")
    o.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    o.add_argument("--out")
    o.add_argument("--force", action="store_true")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        problems = getattr(exc, "problems", [str(exc)])
        for line in problems:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_USAGE
    except (MagGnnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
