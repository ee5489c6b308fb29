"""Marked-graph encoders, prediction heads and random-tuple training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .datasets import DatasetInstance, TASK_GRAPH_CLASS, TASK_NODE_REG, TASKS, stack_targets
from .errors import BudgetError, InvalidParameterError
from .graph import Graph, mark, validate_tuple
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.batch import make_batch
from .nn.layers import MLP, MPNN, NORMS, MpnnSpec, loss, per_row_loss, precise_statistics, training_mode
from .nn.params import Adam, ParamStore
from .wl import DEFAULT_BUDGET, all_tuples


def loss_kind(task: str) -> str:
    return "cross-entropy" if task == TASK_GRAPH_CLASS else "mse"


@dataclass
class PredictionModel:
    """Encoder ``g_p`` over marked copies plus an MLP head.

    Graph tasks sum the per-copy graph poolings before the head; node tasks
    sum each node's rows across copies and apply the head per node. With
    ``k = 0`` nothing is marked, which makes it the plain MPNN baseline.
    """

    spec: MpnnSpec
    k: int
    task: str
    out_dim: int
    seed: int
    head_norm: str = "none"
    store: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidParameterError(f"unknown task {self.task!r}")
        if self.head_norm not in NORMS:
            raise InvalidParameterError(f"unknown head norm {self.head_norm!r}")
        rng = np.random.default_rng(self.seed)
        self.encoder = MPNN(self.spec, self.store, "encoder", rng)
        h = self.spec.hidden_dim
        # a normalised head also standardises its input: with sum pooling over large
        # regular graphs the class signal can be a tiny offset on a huge shared value
        self.head = MLP(self.store, "head", [h, h, self.out_dim], rng, norm=self.head_norm,
                        input_norm=self.head_norm != "none")

    @classmethod
    def create(cls, feature_dim: int, k: int, task: str, out_dim: int, hidden_dim: int = 64,
               num_layers: int = 4, jumping_knowledge: str = "none", norm: str = "batch",
               seed: int = 0, head_norm: str = "none") -> "PredictionModel":
        spec = MpnnSpec(feature_dim + k, hidden_dim, num_layers,
                        jumping_knowledge=jumping_knowledge, norm=norm)
        return cls(spec, k, task, out_dim, seed, head_norm)

    @property
    def node_level(self) -> bool:
        return self.task == TASK_NODE_REG

    @property
    def loss_kind(self) -> str:
        return loss_kind(self.task)

    def config(self) -> dict:
        return {"spec": self.spec.to_dict(), "k": self.k, "task": self.task,
                "out_dim": self.out_dim, "seed": self.seed, "head_norm": self.head_norm}

    @classmethod
    def from_config(cls, cfg: dict) -> "PredictionModel":
        return cls(MpnnSpec(**cfg["spec"]), cfg["k"], cfg["task"], cfg["out_dim"], cfg["seed"],
                   cfg.get("head_norm", "none"))


def sample_tuples(rng: np.random.Generator, num_nodes: int, m: int, k: int) -> np.ndarray:
    """``m`` tuples drawn uniformly with replacement from V^k."""
    return rng.integers(0, num_nodes, size=(m, k))


def _group_matrix(num_groups: int, group_size: int) -> sp.csr_matrix:
    n = num_groups * group_size
    return sp.csr_matrix((np.ones(n), (np.repeat(np.arange(num_groups), group_size), np.arange(n))),
                         shape=(num_groups, n))


def _node_fold_matrix(graphs: Sequence[Graph], m: int) -> sp.csr_matrix:
    """Maps rows of the m marked copies of each graph onto that graph's node rows."""
    rows, cols = [], []
    out_off = 0
    in_off = 0
    for g in graphs:
        n = g.num_nodes
        for _ in range(m):
            rows.append(out_off + np.arange(n))
            cols.append(in_off + np.arange(n))
            in_off += n
        out_off += n
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    return sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(out_off, in_off))


def encode_copies(model: PredictionModel, graphs: Sequence[Graph], tuple_sets: Sequence[np.ndarray]):
    """Encoder outputs for every marked copy; all sets must have the same size m."""
    ms = {len(U) for U in tuple_sets}
    if len(ms) != 1:
        raise InvalidParameterError("all tuple sets in a batch must have the same size")
    m = ms.pop()
    if m < 1:
        raise InvalidParameterError("tuple set must be non-empty")
    if model.k == 0:
        # no marking: the plain MPNN baseline, each "copy" is the bare graph
        marked = [g for g, U in zip(graphs, tuple_sets) for _ in U]
    else:
        marked = [mark(g, t) for g, U in zip(graphs, tuple_sets) for t in U]
    batch = make_batch(marked)
    return model.encoder.forward_batch(batch), batch, m


def predict(model: PredictionModel, graphs: Sequence[Graph], tuple_sets: Sequence[np.ndarray]) -> Tensor:
    """Batched head outputs: one row per graph, or one row per node for node tasks."""
    h, batch, m = encode_copies(model, graphs, tuple_sets)
    if model.node_level:
        z = ad.const_matmul(_node_fold_matrix(graphs, m), h)
    else:
        z = ad.const_matmul(_group_matrix(len(graphs), m), ad.const_matmul(batch.pooling, h))
    return model.head(z)


def encode_single(model: PredictionModel, g: Graph, v: Sequence[int]) -> Tensor:
    """Graph embedding of one marked copy: mark, encode, sum-pool."""
    v = validate_tuple(g, v)
    h = model.encoder(mark(g, v))
    return ad.sum_rows(h)


def encode_set(model: PredictionModel, g: Graph, U: Sequence[Sequence[int]]) -> Tensor:
    if len(U) == 0:
        raise InvalidParameterError("tuple set U must be non-empty")
    U = np.asarray([validate_tuple(g, t) for t in U], dtype=np.int64)
    return predict(model, [g], [U])


def full_subgraph_gnn(model: PredictionModel, g: Graph, k: int | None = None,
                      budget: int = DEFAULT_BUDGET) -> tuple[Tensor, int]:
    """Enumerate every k-tuple; returns (prediction, encoder invocations)."""
    k = model.k if k is None else k
    if g.num_nodes ** k > budget:
        raise BudgetError(f"{g.num_nodes}^{k} tuples exceed budget {budget}")
    U = np.asarray(list(all_tuples(g.num_nodes, k)), dtype=np.int64)
    before = model.encoder.calls
    out = predict(model, [g], [U])
    return out, model.encoder.calls - before


def targets_for(model: PredictionModel, instances: Sequence[DatasetInstance]):
    return stack_targets(model.task, [d.target for d in instances])


def batch_loss(model: PredictionModel, instances: Sequence[DatasetInstance],
               tuple_sets: Sequence[np.ndarray]) -> Tensor:
    out = predict(model, [d.graph for d in instances], tuple_sets)
    return loss(model.loss_kind, out, targets_for(model, instances))


def per_graph_loss(model: PredictionModel, instances: Sequence[DatasetInstance],
                   tuple_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Detached loss per graph (node tasks: mean over the graph's nodes)."""
    with ad.no_grad():
        out = predict(model, [d.graph for d in instances], tuple_sets).value
    rows = per_row_loss(model.loss_kind, out, targets_for(model, instances))
    if not model.node_level:
        return rows
    sizes = [d.graph.num_nodes for d in instances]
    bounds = np.cumsum([0] + sizes)
    return np.array([rows[bounds[i]:bounds[i + 1]].mean() for i in range(len(sizes))])


def train_step(model: PredictionModel, opt: Adam, instances: Sequence[DatasetInstance],
               tuple_sets: Sequence[np.ndarray]) -> float:
    model.store.zero_grad()
    with training_mode(model.encoder, model.head):
        L = batch_loss(model, instances, tuple_sets)
    ad.backward(L)
    opt.step()
    return L.item()


def calibrate_statistics(model: PredictionModel, dataset: Sequence[DatasetInstance], m: int,
                         passes: int = 1, seed: int = 0, batch_size: int = 64, k: int | None = None) -> int:
    """Replace the running normalisation statistics by exact averages over ``passes``
    sweeps of random-tuple batches, weights fixed. Returns the number of batches.

    Momentum averages lag behind the weights during training; on graphs whose
    class signal is a tiny fraction of the activations that lag alone can
    decide the prediction.
    """
    k = model.k if k is None else k
    rng = np.random.default_rng(seed)
    count = 0
    with ad.no_grad(), precise_statistics(model.encoder, model.head):
        for _ in range(passes):
            for idx in iterate_batches(rng, len(dataset), batch_size):
                items = [dataset[i] for i in idx]
                predict(model, [d.graph for d in items], [sample_tuples(rng, d.graph.num_nodes, m, k) for d in items])
                count += 1
    return count


def iterate_batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_random_tuples(model: PredictionModel, dataset: Sequence[DatasetInstance], m: int, k: int | None = None,
                        epochs: int = 1, seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
                        opt: Adam | None = None, callback=None) -> dict:
    """Fit the model with fresh uniform tuples per batch.

    ``callback(epoch, step, loss)`` is invoked after each optimiser step.
    Returns a small history dict.
    """
    if not dataset:
        raise InvalidParameterError("dataset is empty")
    k = model.k if k is None else k
    rng = np.random.default_rng(seed)
    opt = opt or Adam(model.store, lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        for idx in iterate_batches(rng, len(dataset), batch_size):
            items = [dataset[i] for i in idx]
            Us = [sample_tuples(rng, d.graph.num_nodes, m, k) for d in items]
            L = train_step(model, opt, items, Us)
            losses.append(L)
            step += 1
            if callback is not None:
                callback(epoch, step, L)
    return {"steps": step, "losses": losses}
