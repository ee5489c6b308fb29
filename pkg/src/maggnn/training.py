"""Coordination of environment model and agent: ORD, SIMUL and PRE, plus evaluation."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import (
    AgentConfig, EpsilonSchedule, QNetworkModel, ReplayBuffer, initial_state, maybe_sync, random_state,
    rollout_batch, td_optimize,
)
from .datasets import TASK_GRAPH_CLASS, Dataset, DatasetInstance
from .errors import InvalidParameterError, StateError
from .nn import autodiff as ad
from .nn.layers import NORMS, precise_statistics
from .nn.params import Adam
from .subgraph import PredictionModel, iterate_batches, per_graph_loss, predict, sample_tuples, train_step

PARADIGMS = ("ord", "simul", "pre")
METRIC_COLUMNS = ("step", "phase", "loss", "reward_mean", "epsilon", "accuracy", "mae", "mpnn_calls")
METRICS_SCHEMA = "maggnn-metrics/1"


@dataclass
class EnvConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    jumping_knowledge: str = "none"
    norm: str = "batch"
    lr: float = 1e-3
    head_norm: str = "none"
    calibrate: int = 0              # >0: sweeps that re-estimate normalisation statistics after training


@dataclass
class RunConfig:
    paradigm: str = "ord"
    dataset: str = "csl"
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    epochs: int = 100               # environment epochs (ORD phase 1, SIMUL outer epochs, PRE)
    batch_size: int = 16
    agent_steps: int = 1000         # ORD phase-2 optimisation steps
    collect_graphs: int = 1         # rollouts collected per agent step
    prefill: int = 0                # minimum buffer size before the first TD step
    seed: int = 0
    eval_repeats: int = 10
    patience: int = 0               # >0: stop environment epochs when validation loss stalls
    pretrained_agent: str | None = None

    def __post_init__(self):
        problems = validate_run_config(self)
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["agent"] = AgentConfig(**d.get("agent", {}))
        d["env"] = EnvConfig(**d.get("env", {}))
        return cls(**d)


def validate_run_config(cfg: RunConfig) -> list[str]:
    problems = []
    if cfg.paradigm not in PARADIGMS:
        problems.append(f"paradigm: {cfg.paradigm!r} is not one of {', '.join(PARADIGMS)}")
    if cfg.paradigm == "pre" and not cfg.pretrained_agent:
        problems.append("pretrained_agent: required for the pre paradigm")
    for name in ("epochs", "agent_steps", "prefill", "patience"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name}: must be >= 0")
    for name in ("batch_size", "collect_graphs", "eval_repeats"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name}: must be >= 1")
    for name in ("norm", "head_norm"):
        if getattr(cfg.env, name) not in NORMS:
            problems.append(f"env.{name}: {getattr(cfg.env, name)!r} is not one of {', '.join(NORMS)}")
    if cfg.env.calibrate < 0:
        problems.append("env.calibrate: must be >= 0")
    return problems


class MetricsLog:
    """Append-only metric rows, optionally mirrored to a CSV file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict] = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS)
            self._writer.writeheader()
            self._fh.flush()

    def log(self, **row) -> None:
        full = {c: row.get(c, "") for c in METRIC_COLUMNS}
        for c, v in full.items():
            if isinstance(v, float):
                full[c] = repr(v)
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(full)
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def column(self, name: str, phase: str | None = None) -> list:
        return [r[name] for r in self.rows if (phase is None or r["phase"] == phase) and name in r]


@dataclass
class TrainResult:
    env_model: PredictionModel
    qnet: QNetworkModel | None
    log: MetricsLog
    counters: dict


def build_env_model(cfg: RunConfig, ds: Dataset, seed: int | None = None) -> PredictionModel:
    e = cfg.env
    return PredictionModel.create(ds.feature_dim, cfg.agent.k, ds.task, ds.num_outputs, e.hidden_dim,
                                  e.num_layers, e.jumping_knowledge, e.norm,
                                  seed=cfg.seed if seed is None else seed, head_norm=e.head_norm)


def build_qnet(cfg: RunConfig, ds: Dataset) -> QNetworkModel:
    return QNetworkModel.from_agent_config(ds.feature_dim, cfg.agent, seed=cfg.seed + 1)


def total_calls(env_model: PredictionModel, qnet: QNetworkModel | None) -> int:
    n = env_model.encoder.calls
    if qnet is not None:
        n += qnet.online.encoder.calls + qnet.target.encoder.calls
    return n


def _train_env(cfg: RunConfig, model: PredictionModel, train: Sequence[DatasetInstance], log: MetricsLog,
               rng: np.random.Generator, opt: Adam, qnet: QNetworkModel | None = None, phase: str = "env",
               epochs: int | None = None, step0: int = 0, valid: Sequence[DatasetInstance] = ()) -> int:
    """Epoch loop over shuffled batches; tuples are random, or moved t greedy agent steps when
    ``qnet`` is given (PRE). With t = 0 the two coincide draw for draw.

    With ``cfg.patience`` > 0 and a validation split, training stops once the
    validation loss (on tuples fixed up front) has not improved for that many epochs.
    """
    m, k, t = cfg.agent.m, cfg.agent.k, cfg.agent.t
    step = step0
    stopper = None
    if cfg.patience > 0 and valid:
        vrng = np.random.default_rng(cfg.seed + 7919)
        stopper = ([sample_tuples(vrng, d.graph.num_nodes, m, k) for d in valid], [np.inf, 0])

    def tuples_for(items):
        Us = [sample_tuples(rng, d.graph.num_nodes, m, k) for d in items]
        if qnet is not None and t > 0:
            states = [initial_state(d.graph, U, cfg.agent.w_dim) for d, U in zip(items, Us)]
            finals, _ = rollout_batch(qnet, None, None, states, t, 0.0, rng, with_rewards=False)
            Us = [s.tuples for s in finals]
        return Us

    for _ in range(cfg.epochs if epochs is None else epochs):
        for idx in iterate_batches(rng, len(train), cfg.batch_size):
            items = [train[i] for i in idx]
            L = train_step(model, opt, items, tuples_for(items))
            step += 1
            log.log(step=step, phase=phase, loss=L, mpnn_calls=total_calls(model, qnet))
        if stopper is not None:
            vl = float(per_graph_loss(model, valid, stopper[0]).mean())
            log.log(step=step, phase="valid", loss=vl, mpnn_calls=total_calls(model, qnet))
            best = stopper[1]
            if vl < best[0]:
                best[0], best[1] = vl, 0
            else:
                best[1] += 1
                if best[1] >= cfg.patience:
                    break
    if cfg.env.calibrate > 0:
        with ad.no_grad(), precise_statistics(model.encoder, model.head):
            for _ in range(cfg.env.calibrate):
                for idx in iterate_batches(rng, len(train), cfg.batch_size):
                    items = [train[i] for i in idx]
                    predict(model, [d.graph for d in items], tuples_for(items))
    return step


def _collect(cfg: RunConfig, env_model: PredictionModel, qnet: QNetworkModel, train, rng, epsilon: float,
             num_graphs: int):
    idx = rng.integers(0, len(train), size=num_graphs)
    items = [train[i] for i in idx]
    a = cfg.agent
    states = [random_state(d.graph, a.m, a.k, rng, a.w_dim) for d in items]
    _, trajs = rollout_batch(qnet, env_model, items, states, a.t, epsilon, rng)
    return [e for tr in trajs for e in tr]


def ord_train(cfg: RunConfig, ds: Dataset, metrics_path: str | Path | None = None,
              env_model: PredictionModel | None = None) -> TrainResult:
    """Phase 1 fits the environment on random tuples; phase 2 freezes it and trains the agent.

    Passing an already trained ``env_model`` skips phase 1.
    """
    train = ds.split("train")
    if not train:
        raise InvalidParameterError("dataset has no training instances")
    log = MetricsLog(metrics_path)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    if env_model is None:
        env_model = build_env_model(cfg, ds)
        step = _train_env(cfg, env_model, train, log, rng, Adam(env_model.store, cfg.env.lr),
                          valid=ds.split("valid"))
    qnet = build_qnet(cfg, ds)
    a = cfg.agent
    frozen = env_model.store.checksum()
    counters = {"env_steps": step, "agent_steps": 0, "syncs": 0, "prefill_rollouts": 0,
                "collected_rollouts": 0}
    if a.t > 0 and cfg.agent_steps > 0:
        buf = ReplayBuffer(a.capacity)
        decay = a.eps_decay_steps if a.eps_decay_steps is not None else max(1, cfg.agent_steps // 2)
        sched = EpsilonSchedule(a.eps_start, a.eps_end, decay)
        opt = Adam(qnet.store, a.lr)
        need = max(a.batch_size, cfg.prefill)
        while len(buf) < need:
            buf.extend(_collect(cfg, env_model, qnet, train, rng, sched(0), cfg.collect_graphs))
            counters["prefill_rollouts"] += cfg.collect_graphs
        for s in range(cfg.agent_steps):
            eps = sched(s)
            fresh = _collect(cfg, env_model, qnet, train, rng, eps, cfg.collect_graphs)
            buf.extend(fresh)
            counters["collected_rollouts"] += cfg.collect_graphs
            L = td_optimize(qnet, buf.sample(rng, a.batch_size), a.gamma, opt)
            if maybe_sync(qnet, a.sync_rate):
                counters["syncs"] += 1
            counters["agent_steps"] += 1
            step += 1
            log.log(step=step, phase="agent", loss=L, reward_mean=float(np.mean([e.reward for e in fresh])),
                    epsilon=eps, mpnn_calls=total_calls(env_model, qnet))
        counters["buffer"] = buf.stats()
    if env_model.store.checksum() != frozen:
        raise StateError("environment parameters changed during agent training")
    log.close()
    return TrainResult(env_model, qnet, log, counters)


def simul_train(cfg: RunConfig, ds: Dataset, metrics_path: str | Path | None = None,
                monitor: Sequence[DatasetInstance] = ()) -> TrainResult:
    """Interleaved: each outer step moves tuples of a batch with the agent, fits the environment on
    them, then stores one fresh rollout and takes one TD step.

    ``monitor`` graphs get fixed random tuples; their mean environment loss is
    recorded per step under ``heldout_loss`` in the in-memory rows (those passes
    count as encoder calls like any other).
    """
    train = ds.split("train")
    if not train:
        raise InvalidParameterError("dataset has no training instances")
    log = MetricsLog(metrics_path)
    rng = np.random.default_rng(cfg.seed)
    mrng = np.random.default_rng(cfg.seed + 7919)
    monitor = list(monitor)
    mtuples = [sample_tuples(mrng, d.graph.num_nodes, cfg.agent.m, cfg.agent.k) for d in monitor]
    env_model = build_env_model(cfg, ds)
    qnet = build_qnet(cfg, ds)
    a = cfg.agent
    env_opt = Adam(env_model.store, cfg.env.lr)
    agent_opt = Adam(qnet.store, a.lr)
    buf = ReplayBuffer(a.capacity)
    per_epoch = -(-len(train) // cfg.batch_size)
    outer = cfg.epochs * per_epoch
    decay = a.eps_decay_steps if a.eps_decay_steps is not None else max(1, outer // 2)
    sched = EpsilonSchedule(a.eps_start, a.eps_end, decay)
    counters = {"env_steps": 0, "agent_steps": 0, "syncs": 0}
    for s in range(outer):
        eps = sched(s)
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        items = [train[i] for i in idx]
        states = [random_state(d.graph, a.m, a.k, rng, a.w_dim) for d in items]
        finals, _ = rollout_batch(qnet, None, None, states, a.t, eps, rng, with_rewards=False)
        env_loss = train_step(env_model, env_opt, items, [f.tuples for f in finals])
        counters["env_steps"] += 1
        fresh = _collect(cfg, env_model, qnet, train, rng, eps, 1)
        buf.extend(fresh)
        td = None
        if len(buf):
            td = td_optimize(qnet, buf.sample(rng, a.batch_size), a.gamma, agent_opt)
            counters["agent_steps"] += 1
            if maybe_sync(qnet, a.sync_rate):
                counters["syncs"] += 1
        log.log(step=s + 1, phase="simul", loss=env_loss, epsilon=eps,
                reward_mean=float(np.mean([e.reward for e in fresh])) if fresh else 0.0,
                mpnn_calls=total_calls(env_model, qnet))
        if td is not None:
            log.rows[-1]["agent_loss"] = td
        if monitor:
            log.rows[-1]["heldout_loss"] = float(per_graph_loss(env_model, monitor, mtuples).mean())
    counters["buffer"] = buf.stats()
    log.close()
    return TrainResult(env_model, qnet, log, counters)


def pre_train_head(cfg: RunConfig, qnet: QNetworkModel, ds: Dataset,
                   metrics_path: str | Path | None = None) -> TrainResult:
    """Fit a fresh prediction model on tuples produced by a frozen agent."""
    train = ds.split("train")
    if not train:
        raise InvalidParameterError("dataset has no training instances")
    if qnet.k != cfg.agent.k:
        raise InvalidParameterError(f"agent tuples have order {qnet.k}, config asks for {cfg.agent.k}")
    log = MetricsLog(metrics_path)
    rng = np.random.default_rng(cfg.seed)
    env_model = build_env_model(cfg, ds)
    frozen = qnet.store.checksum()
    step = _train_env(cfg, env_model, train, log, rng, Adam(env_model.store, cfg.env.lr), qnet=qnet, phase="pre",
                      valid=ds.split("valid"))
    if qnet.store.checksum() != frozen:
        raise StateError("agent parameters changed during head training")
    log.close()
    return TrainResult(env_model, qnet, log, {"env_steps": step})


def train(cfg: RunConfig, ds: Dataset, metrics_path=None, qnet: QNetworkModel | None = None) -> TrainResult:
    if cfg.paradigm == "ord":
        return ord_train(cfg, ds, metrics_path)
    if cfg.paradigm == "simul":
        return simul_train(cfg, ds, metrics_path)
    if qnet is None:
        raise InvalidParameterError("pre paradigm needs a frozen agent")
    return pre_train_head(cfg, qnet, ds, metrics_path)


def _score(task: str, out: np.ndarray, instances: Sequence[DatasetInstance], scale=None) -> np.ndarray:
    """Per-graph score: correctness for classification, mean absolute error otherwise."""
    if task == TASK_GRAPH_CLASS:
        y = np.array([int(d.target) for d in instances])
        return (out.argmax(axis=1) == y).astype(np.float64)
    scale = 1.0 if scale is None else np.asarray(scale)
    scores, off = [], 0
    for d in instances:
        tgt = np.asarray(d.target, dtype=np.float64).reshape(-1, out.shape[1])
        rows = out[off:off + len(tgt)]
        off += len(tgt)
        scores.append(float(np.abs((rows - tgt) * scale).mean()))
    return np.asarray(scores)


def evaluate(model: PredictionModel, qnet: QNetworkModel | None, instances: Sequence[DatasetInstance],
             repeats: int = 10, t: int = 0, m: int = 1, seed: int = 0, scale=None) -> dict:
    """Greedy (epsilon 0) search from fresh random tuples, repeated with independent draws.

    ``curve[s]`` is the mean score after ``s`` agent steps, so it has ``t + 1``
    entries. Classification scores are accuracies; regression scores are MAE
    (multiplied by ``scale`` when targets were standardised).
    """
    if repeats < 1:
        raise InvalidParameterError("repeats must be >= 1")
    if t > 0 and qnet is None:
        raise InvalidParameterError("agent steps need an agent")
    if not instances:
        raise InvalidParameterError("no instances to evaluate")
    rng = np.random.default_rng(seed)
    before = total_calls(model, qnet)
    k = model.k
    curves = np.zeros((repeats, t + 1))
    per_graph = np.zeros((repeats, len(instances)))
    graphs = [d.graph for d in instances]
    for r in range(repeats):
        if t == 0:
            # same draws as random_state; also serves the unmarked (k = 0) baseline
            sets = [sample_tuples(rng, g.num_nodes, m, k) for g in graphs]
        else:
            states = [random_state(g, m, k, rng) for g in graphs]
        for s in range(t + 1):
            if t > 0:
                sets = [st.tuples for st in states]
            with ad.no_grad():
                out = predict(model, graphs, sets).value
            sc = _score(model.task, out, instances, scale)
            curves[r, s] = sc.mean()
            if s == t:
                per_graph[r] = sc
            else:
                states, _ = rollout_batch(qnet, None, None, states, 1, 0.0, rng, with_rewards=False)
    final = curves[:, -1]
    metric = "accuracy" if model.task == TASK_GRAPH_CLASS else "mae"
    return {
        "metric": metric,
        "mean": float(final.mean()),
        "std": float(final.std(ddof=1)) if repeats > 1 else 0.0,
        "per_repeat": final.tolist(),
        "curve": curves.mean(axis=0).tolist(),
        "curve_std": (curves.std(axis=0, ddof=1) if repeats > 1 else np.zeros(t + 1)).tolist(),
        "per_graph": per_graph.mean(axis=0).tolist(),
        "repeats": repeats,
        "steps": t,
        "mpnn_calls": total_calls(model, qnet) - before,
    }


def expected_env_calls(num_train: int, epochs: int, m: int, calibrate: int = 0) -> int:
    """Encoder invocations of random-tuple environment training: one per marked copy
    (calibration sweeps encode every training graph once more each)."""
    return num_train * (epochs + calibrate) * m


def expected_ord_agent_calls(rollouts: int, t: int, m: int, td_steps: int, batch_size: int) -> dict:
    """Closed-form counts for ORD phase 2.

    Each rollout step encodes m copies for the Q-tables and 2m copies for the
    reward; each TD step encodes m copies per sampled experience in both the
    online and the target network.
    """
    return {"q": rollouts * t * m + td_steps * batch_size * m,
            "target": td_steps * batch_size * m,
            "env": rollouts * t * 2 * m}


def expected_eval_calls(num_graphs: int, repeats: int, t: int, m: int) -> dict:
    return {"env": num_graphs * repeats * (t + 1) * m, "q": num_graphs * repeats * t * m}
