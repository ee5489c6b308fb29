"""Deep-Q agent that relocates marked node tuples.

State: a graph, ``m`` k-tuples and a zero ``m x w`` tracker ``W``.
Action (reduced space): for every tuple at once, a position ``j`` (0-based)
and a replacement node ``l``. The Q-table of tuple ``i`` has one row per
node and one column per position.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidActionError, InvalidParameterError, StateError
from .graph import Graph, mark, validate_tuple
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.batch import make_batch
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import MLP, MPNN, MpnnSpec, training_mode
from .nn.params import Adam, ParamStore
from .subgraph import PredictionModel, per_graph_loss


@dataclass(frozen=True, eq=False)
class AgentState:
    graph: Graph
    tuples: np.ndarray          # (m, k) int
    W: np.ndarray               # (m, w) float

    def __post_init__(self):
        t = np.asarray(self.tuples, dtype=np.int64)
        if t.ndim != 2:
            raise InvalidParameterError("tuples must be an (m, k) array")
        for row in t:
            validate_tuple(self.graph, row)
        w = np.asarray(self.W, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != t.shape[0]:
            raise InvalidParameterError("W must have one row per tuple")
        t.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "tuples", t)
        object.__setattr__(self, "W", w)

    @property
    def m(self) -> int:
        return self.tuples.shape[0]

    @property
    def k(self) -> int:
        return self.tuples.shape[1]

    def tuple_list(self) -> list[tuple[int, ...]]:
        return [tuple(int(x) for x in row) for row in self.tuples]


def initial_state(graph: Graph, tuples, w_dim: int = 1) -> AgentState:
    t = np.asarray(tuples, dtype=np.int64)
    return AgentState(graph, t, np.zeros((t.shape[0], w_dim)))


def random_state(graph: Graph, m: int, k: int, rng: np.random.Generator, w_dim: int = 1) -> AgentState:
    return initial_state(graph, rng.integers(0, graph.num_nodes, size=(m, k)), w_dim)


@dataclass(frozen=True)
class JointAction:
    """One (position j, node l) choice per tuple; j is 0-based."""

    choices: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.choices)

    def validate(self, state: AgentState) -> None:
        if len(self.choices) != state.m:
            raise InvalidActionError(f"expected {state.m} choices, got {len(self.choices)}")
        for j, l in self.choices:
            if not 0 <= j < state.k:
                raise InvalidActionError(f"position {j} outside 0..{state.k - 1}")
            if not 0 <= l < state.graph.num_nodes:
                raise InvalidActionError(f"node {l} outside 0..{state.graph.num_nodes - 1}")


@dataclass(frozen=True, eq=False)
class Experience:
    state: AgentState
    action: JointAction
    reward: float
    next_state: AgentState


class ReplayBuffer:
    """Bounded FIFO memory with uniform sampling (with replacement)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidParameterError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        self.total_added = 0

    def __len__(self):
        return len(self._items)

    def add(self, e: Experience) -> None:
        self._items.append(e)
        self.total_added += 1

    def extend(self, es) -> None:
        for e in es:
            self.add(e)

    def items(self) -> list[Experience]:
        return list(self._items)

    def sample(self, rng: np.random.Generator, n: int) -> list[Experience]:
        if not self._items:
            raise StateError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def stats(self) -> dict:
        return {"size": len(self), "capacity": self.capacity, "total_added": self.total_added}


@dataclass
class AgentConfig:
    m: int = 1
    k: int = 2
    t: int = 4
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.0
    eps_decay_steps: int | None = None   # None: half of the agent's optimisation steps
    capacity: int = 30000
    batch_size: int = 32
    sync_rate: int = 150
    lr: float = 1e-3
    hidden_dim: int = 64
    num_layers: int = 4
    norm: str = "batch"
    w_dim: int = 1
    summary: str = "sum"

    def __post_init__(self):
        problems = []
        if self.norm not in ("batch", "layer", "none"):
            problems.append("norm must be 'batch', 'layer' or 'none'")
        if self.summary not in ("sum", "mean"):
            problems.append("summary must be 'sum' or 'mean'")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append("gamma must lie in [0, 1]")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        for name in ("m", "k", "capacity", "batch_size", "sync_rate", "hidden_dim", "num_layers", "w_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.t < 0:
            problems.append("t must be >= 0")
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps``, then constant."""

    start: float = 1.0
    end: float = 0.0
    decay_steps: int = 1

    def __call__(self, step: int) -> float:
        if self.decay_steps <= 0 or step >= self.decay_steps:
            return self.end
        frac = step / self.decay_steps
        return self.start + (self.end - self.start) * frac


class _QNet:
    """g_rl plus the Q-head, bound to one parameter store."""

    def __init__(self, spec: MpnnSpec, k: int, w_dim: int, store: ParamStore, seed: int,
                 zero_head: bool = False):
        rng = np.random.default_rng(seed)
        h = spec.hidden_dim
        self.encoder = MPNN(spec, store, "g_rl", rng)
        self.head = MLP(store, "q_head", [2 * h + w_dim, h, k], rng, zero_last=zero_head)


@dataclass
class QNetworkModel:
    feature_dim: int
    k: int
    hidden_dim: int = 64
    num_layers: int = 4
    norm: str = "batch"
    w_dim: int = 1
    seed: int = 0
    zero_head: bool = True
    summary: str = "sum"        # "sum" | "mean": how node rows are pooled per copy
    store: ParamStore = field(default_factory=ParamStore)
    target_store: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        self.spec = MpnnSpec(self.feature_dim + self.k, self.hidden_dim, self.num_layers, norm=self.norm)
        self.online = _QNet(self.spec, self.k, self.w_dim, self.store, self.seed, self.zero_head)
        self.target = _QNet(self.spec, self.k, self.w_dim, self.target_store, self.seed, self.zero_head)
        self.target_store.copy_from(self.store)
        self.steps_since_sync = 0
        self.num_syncs = 0

    @classmethod
    def from_agent_config(cls, feature_dim: int, cfg: AgentConfig, seed: int = 0) -> "QNetworkModel":
        return cls(feature_dim, cfg.k, cfg.hidden_dim, cfg.num_layers, cfg.norm, cfg.w_dim, seed,
                   summary=cfg.summary)

    @property
    def calls(self) -> int:
        """Online g_rl invocations (one per marked copy)."""
        return self.online.encoder.calls

    def config(self) -> dict:
        return {"feature_dim": self.feature_dim, "k": self.k, "hidden_dim": self.hidden_dim,
                "num_layers": self.num_layers, "norm": self.norm, "w_dim": self.w_dim,
                "seed": self.seed, "zero_head": self.zero_head, "summary": self.summary}

    @classmethod
    def from_config(cls, cfg: dict) -> "QNetworkModel":
        return cls(**cfg)


def _state_expansion(states: Sequence[AgentState], batch) -> tuple[sp.csr_matrix, np.ndarray]:
    """Matrix summing each state's copy poolings onto all of its node rows, plus pooled-W rows."""
    rows, cols, wrows = [], [], []
    base = 0
    for s in states:
        wsum = s.W.sum(axis=0)
        for c in range(base, base + s.m):
            node_rows = np.arange(batch.offsets[c], batch.offsets[c] + batch.sizes[c])
            for c2 in range(base, base + s.m):
                rows.append(node_rows)
                cols.append(np.full(len(node_rows), c2))
            wrows.append(np.repeat(wsum[None, :], len(node_rows), axis=0))
        base += s.m
    r = np.concatenate(rows)
    cc = np.concatenate(cols)
    E = sp.csr_matrix((np.ones(len(r)), (r, cc)), shape=(batch.total_nodes, batch.num_graphs))
    return E, np.concatenate(wrows, axis=0)


def _q_forward(net: _QNet, states: Sequence[AgentState], summary: str = "sum") -> tuple[Tensor, object]:
    marked = [mark(s.graph, tuple(int(x) for x in row)) for s in states for row in s.tuples]
    batch = make_batch(marked)
    h = net.encoder.forward_batch(batch)
    E, wrows = _state_expansion(states, batch)
    P = batch.pooling
    if summary == "mean":
        P = sp.diags(1.0 / batch.sizes) @ P
    pooled = ad.const_matmul(P.tocsr(), h)
    across = ad.const_matmul(E, pooled)
    x = ad.concat([h, across, Tensor(wrows)], axis=1)
    return net.head(x), batch


def q_tables_batch(qnet: QNetworkModel, states: Sequence[AgentState], target: bool = False) -> list[list[np.ndarray]]:
    """Detached Q-tables: result[s][i] is the (num_nodes x k) table of tuple i of state s."""
    net = qnet.target if target else qnet.online
    with ad.no_grad():
        q, batch = _q_forward(net, states, qnet.summary)
    out, c = [], 0
    for s in states:
        tabs = []
        for _ in range(s.m):
            off, n = batch.offsets[c], batch.sizes[c]
            tabs.append(q.value[off:off + n])
            c += 1
        out.append(tabs)
    return out


def q_table(qnet: QNetworkModel, state: AgentState, tuple_index: int, target: bool = False) -> np.ndarray:
    """Q-table of one tuple (0-based index) as a (num_nodes x k) array."""
    if not 0 <= tuple_index < state.m:
        raise InvalidParameterError(f"tuple index {tuple_index} outside 0..{state.m - 1}")
    return q_tables_batch(qnet, [state], target)[0][tuple_index]


def greedy_choice(table: np.ndarray) -> tuple[int, int]:
    """(j, l) of the first maximum in row-major order, i.e. smallest (l, j) on ties."""
    idx = int(np.argmax(table.reshape(-1)))
    l, j = divmod(idx, table.shape[1])
    return j, l


def choose(tables: Sequence[np.ndarray], epsilon: float, rng: np.random.Generator) -> JointAction:
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidParameterError("epsilon must lie in [0, 1]")
    out = []
    for tab in tables:
        if epsilon > 0.0 and rng.random() < epsilon:
            idx = int(rng.integers(0, tab.size))
            l, j = divmod(idx, tab.shape[1])
            out.append((j, l))
        else:
            out.append(greedy_choice(tab))
    return JointAction(tuple(out))


def select_action(qnet: QNetworkModel, state: AgentState, epsilon: float, rng: np.random.Generator) -> JointAction:
    """Epsilon-greedy per tuple; all choices come from the same current state."""
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidParameterError("epsilon must lie in [0, 1]")
    if epsilon >= 1.0:
        n, k = state.graph.num_nodes, state.k
        return choose([np.zeros((n, k))] * state.m, 1.0, rng)
    return choose(q_tables_batch(qnet, [state])[0], epsilon, rng)


def identity_update(W: np.ndarray, state: AgentState, action: JointAction) -> np.ndarray:
    return W


def apply_action(state: AgentState, action: JointAction, f_w=identity_update) -> AgentState:
    action.validate(state)
    new = state.tuples.copy()
    for i, (j, l) in enumerate(action.choices):
        new[i, j] = l
    return AgentState(state.graph, new, f_w(state.W.copy(), state, action))


def reward_batch(env_model: PredictionModel, instances, old_sets, new_sets) -> np.ndarray:
    """Loss improvements L(U_old) - L(U_new) per instance (detached)."""
    before = per_graph_loss(env_model, instances, old_sets)
    after = per_graph_loss(env_model, instances, new_sets)
    return before - after


def reward(env_model: PredictionModel, g: Graph, U_old, U_new, target) -> float:
    from .datasets import DatasetInstance
    inst = [DatasetInstance(g, target)]
    U_old = np.asarray(U_old, dtype=np.int64)
    U_new = np.asarray(U_new, dtype=np.int64)
    return float(reward_batch(env_model, inst, [U_old], [U_new])[0])


def td_loss(qnet: QNetworkModel, batch: Sequence[Experience], gamma: float) -> Tensor:
    """Mean squared TD error over experiences and tuples (shared reward per tuple)."""
    if not batch:
        raise InvalidParameterError("TD batch is empty")
    next_tabs = q_tables_batch(qnet, [e.next_state for e in batch], target=True)
    with training_mode(qnet.online.encoder):
        q, qb = _q_forward(qnet.online, [e.state for e in batch], qnet.summary)
    k = qnet.k
    flat_idx, ys = [], []
    c = 0
    for e, tabs in zip(batch, next_tabs):
        for i, (j, l) in enumerate(e.action.choices):
            flat_idx.append((qb.offsets[c] + l) * k + j)
            ys.append(e.reward + gamma * float(tabs[i].max()))
            c += 1
    picked = ad.take_flat(q, np.asarray(flat_idx))
    diff = picked - Tensor(np.asarray(ys, dtype=np.float64).reshape(picked.shape))
    return ad.mean_all(ad.square(diff))


def td_optimize(qnet: QNetworkModel, batch: Sequence[Experience], gamma: float, opt: Adam) -> float:
    """One optimiser step on the online network; returns the loss before the step."""
    qnet.store.zero_grad()
    L = td_loss(qnet, batch, gamma)
    ad.backward(L)
    opt.step()
    qnet.steps_since_sync += 1
    return L.item()


def sync_target(qnet: QNetworkModel) -> None:
    qnet.target_store.copy_from(qnet.store)
    qnet.steps_since_sync = 0
    qnet.num_syncs += 1


def maybe_sync(qnet: QNetworkModel, sync_rate: int) -> bool:
    if qnet.steps_since_sync >= sync_rate:
        sync_target(qnet)
        return True
    return False


def rollout_batch(qnet: QNetworkModel, env_model: PredictionModel | None, instances, states: Sequence[AgentState],
                  steps: int, epsilon: float, rng: np.random.Generator, with_rewards: bool = True):
    """Advance several states ``steps`` times; returns (final states, per-state trajectories).

    Q-tables for all states are computed in one batched pass per step. With
    ``with_rewards`` each step costs two environment passes (before/after).
    """
    if steps < 0:
        raise InvalidParameterError("steps must be >= 0")
    states = list(states)
    trajs: list[list[Experience]] = [[] for _ in states]
    for _ in range(steps):
        # tables are computed even at epsilon 1 so every step costs exactly m encoder calls
        tabs = q_tables_batch(qnet, states)
        acts = [choose(t, epsilon, rng) for t in tabs]
        nxt = [apply_action(s, a) for s, a in zip(states, acts)]
        if with_rewards and env_model is not None:
            rs = reward_batch(env_model, instances, [s.tuples for s in states], [s.tuples for s in nxt])
        else:
            rs = np.zeros(len(states))
        for i, (s, a, r, s2) in enumerate(zip(states, acts, rs, nxt)):
            trajs[i].append(Experience(s, a, float(r), s2))
        states = nxt
    return states, trajs


def rollout(qnet: QNetworkModel, env_model: PredictionModel | None, g: Graph, initial: AgentState, steps: int,
            epsilon: float, rng: np.random.Generator, target=None):
    """Single-graph rollout; rewards need ``target`` (skipped when it is None)."""
    from .datasets import DatasetInstance
    inst = [DatasetInstance(g, target)] if target is not None else None
    finals, trajs = rollout_batch(qnet, env_model, inst, [initial], steps, epsilon, rng,
                                  with_rewards=target is not None)
    return finals[0], trajs[0]


def save_agent(path: str | Path, qnet: QNetworkModel, extra: dict | None = None) -> None:
    meta = {"qnet": qnet.config(), "steps_since_sync": qnet.steps_since_sync, "num_syncs": qnet.num_syncs}
    save_checkpoint(path, {"online": qnet.store, "target": qnet.target_store}, meta)
    side = Path(str(path) + ".agent.json")
    side.write_text(json.dumps(extra or {}, indent=2, sort_keys=True))


def load_agent(path: str | Path) -> tuple[QNetworkModel, dict]:
    from .nn.checkpoint import read_manifest
    meta = read_manifest(path)["meta"]
    qnet = QNetworkModel.from_config(meta["qnet"])
    load_checkpoint(path, {"online": qnet.store, "target": qnet.target_store})
    qnet.steps_since_sync = meta["steps_since_sync"]
    qnet.num_syncs = meta["num_syncs"]
    side = Path(str(path) + ".agent.json")
    extra = json.loads(side.read_text()) if side.exists() else {}
    return qnet, extra
