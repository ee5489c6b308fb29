"""Affine layers, MLPs, the GIN-style message-passing network and losses."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from . import autodiff as ad
from .autodiff import Tensor
from .batch import GraphBatch, make_batch
from .params import ParamStore, glorot_uniform


class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, zero: bool = False):
        w = np.zeros((in_dim, out_dim)) if zero else glorot_uniform(rng, in_dim, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros((1, out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.add(f"{name}.gain", np.ones((1, dim)))
        self.shift = store.add(f"{name}.shift", np.zeros((1, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x) * self.gain + self.shift


class BatchNorm:
    """Per-feature standardisation over all node rows of a batch.

    Training mode uses batch statistics and updates the running averages
    (kept as non-trainable buffers so they travel with checkpoints and target
    copies); evaluation mode is a fixed affine map of the running averages.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = store.add(f"{name}.gain", np.ones((1, dim)))
        self.shift = store.add(f"{name}.shift", np.zeros((1, dim)))
        self.running_mean = store.add(f"{name}.running_mean", np.zeros((1, dim)), trainable=False)
        self.running_var = store.add(f"{name}.running_var", np.ones((1, dim)), trainable=False)
        self.momentum = momentum
        self.eps = eps
        self.training = False
        self.cumulative: int | None = None   # set by precise_statistics: equal-weight averaging

    def train(self, mode: bool = True):
        self.training = mode

    def all_norms(self):
        return [self]

    def __call__(self, x: Tensor) -> Tensor:
        if self.training and x.shape[0] > 1:
            # biased variance: evaluation then reproduces the training-time map exactly
            y, mu, var = ad.batch_norm(x, self.eps)
            if self.cumulative is None:
                a = self.momentum
            else:
                self.cumulative += 1
                a = 1.0 / self.cumulative
            self.running_mean.value = (1 - a) * self.running_mean.value + a * mu
            self.running_var.value = (1 - a) * self.running_var.value + a * var
        else:
            inv = 1.0 / np.sqrt(self.running_var.value + self.eps)
            y = (x - Tensor(self.running_mean.value)) * Tensor(inv)
        return y * self.gain + self.shift


NORMS = ("batch", "layer", "none")


class MLP:
    """Linear layers with ReLU in between; ``norm`` ("batch" or "layer") goes before each ReLU."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int], rng: np.random.Generator,
                 norm="none", final_activation: bool = False, zero_last: bool = False,
                 input_norm: bool = False):
        if norm is True:
            norm = "layer"
        elif not norm:
            norm = "none"
        self.layers = []
        self.norms = []
        self.input_norm = None
        if input_norm and norm != "none":
            cls = BatchNorm if norm == "batch" else LayerNorm
            self.input_norm = cls(store, f"{name}.norm_in", dims[0])
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", a, b, rng, zero=zero_last and last))
            if norm != "none" and not last:
                cls = BatchNorm if norm == "batch" else LayerNorm
                self.norms.append(cls(store, f"{name}.norm{i}", b))
        self.norm = norm != "none"
        self.final_activation = final_activation

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def all_norms(self) -> list:
        return ([self.input_norm] if self.input_norm is not None else []) + self.norms

    def train(self, flag: bool = True) -> None:
        for nm in self.all_norms():
            nm.training = flag

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        if self.input_norm is not None:
            x = self.input_norm(x)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                if self.norm:
                    x = self.norms[i](x)
                x = ad.relu(x)
            elif self.final_activation:
                x = ad.relu(x)
        return x


@dataclass
class MpnnSpec:
    in_dim: int
    hidden_dim: int = 64
    num_layers: int = 4
    epsilon: float = 0.0
    learn_epsilon: bool = False
    jumping_knowledge: str = "none"   # "none" | "sum"
    norm: str = "batch"               # "batch" | "layer" | "none"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ShapeError("num_layers must be >= 1")
        if self.jumping_knowledge not in ("none", "sum"):
            raise ShapeError(f"unknown jumping_knowledge {self.jumping_knowledge!r}")
        if self.norm not in NORMS:
            raise ShapeError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class MPNN:
    """Sum-aggregation GIN layers: h <- MLP((1 + eps) h + sum of neighbour h).

    ``calls`` counts encoded graphs (one per marked copy), the unit of cost
    used throughout the complexity accounting.
    """

    def __init__(self, spec: MpnnSpec, store: ParamStore, name: str, rng: np.random.Generator):
        self.spec = spec
        self.layers = []
        self.eps = []
        dim = spec.in_dim
        for t in range(spec.num_layers):
            self.layers.append(MLP(store, f"{name}.layer{t}", [dim, spec.hidden_dim, spec.hidden_dim],
                                   rng, norm=spec.norm, final_activation=True))
            if spec.learn_epsilon:
                self.eps.append(store.add(f"{name}.eps{t}", np.array([[spec.epsilon]])))
            dim = spec.hidden_dim
        self.calls = 0

    @property
    def out_dim(self) -> int:
        return self.spec.hidden_dim

    def train(self, flag: bool = True) -> None:
        """Switch normalisation layers between batch statistics and running averages."""
        for mlp in self.layers:
            mlp.train(flag)

    def forward_batch(self, batch: GraphBatch) -> Tensor:
        if batch.features.shape[1] != self.spec.in_dim:
            raise ShapeError(f"input feature dim {batch.features.shape[1]} != spec {self.spec.in_dim}")
        self.calls += batch.num_graphs
        h = Tensor(batch.features)
        outs = []
        for t, mlp in enumerate(self.layers):
            agg = ad.const_matmul(batch.adjacency, h)
            if self.spec.learn_epsilon:
                self_term = h * (1.0 + self.eps[t])
            elif self.spec.epsilon != 0.0:
                self_term = ad.scale(h, 1.0 + self.spec.epsilon)
            else:
                self_term = h
            h = mlp(self_term + agg)
            outs.append(h)
        if self.spec.jumping_knowledge == "sum":
            h = outs[0]
            for o in outs[1:]:
                h = h + o
        return h

    def __call__(self, graph) -> Tensor:
        return self.forward_batch(make_batch([graph]))


@contextmanager
def training_mode(*modules):
    """Use batch statistics inside the block, running averages afterwards."""
    for m in modules:
        m.train(True)
    try:
        yield
    finally:
        for m in modules:
            m.train(False)


def batch_norms(*modules) -> list[BatchNorm]:
    out = []
    for m in modules:
        if isinstance(m, MPNN):
            norms = [nm for layer in m.layers for nm in layer.all_norms()]
        else:
            norms = m.all_norms()
        out += [nm for nm in norms if isinstance(nm, BatchNorm)]
    return out


@contextmanager
def precise_statistics(*modules):
    """Training-mode block in which running statistics become plain averages over
    the batches seen inside it (weights are expected to stay fixed)."""
    norms = batch_norms(*modules)
    for nm in norms:
        nm.cumulative = 0
    try:
        with training_mode(*modules):
            yield
    finally:
        for nm in norms:
            nm.cumulative = None


def mpnn_forward(mpnn: MPNN, graph) -> Tensor:
    return mpnn(graph)


def pool(mode: str, h: Tensor, batch: GraphBatch | None = None) -> Tensor:
    """Graph mode sums node rows (per graph when a batch is given); node mode is identity."""
    if mode == "node":
        return h
    if mode != "graph":
        raise ValueError(f"unknown pooling mode {mode!r}")
    if batch is None:
        return ad.sum_rows(h)
    return ad.const_matmul(batch.pooling, h)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.value.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    lp = ad.log_softmax(logits)
    picked = ad.take_flat(lp, np.arange(len(labels)) * logits.shape[1] + labels)
    return ad.scale(ad.sum_all(picked), -1.0 / len(labels))


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return ad.mean_all(ad.square(pred - Tensor(target)))


def mae(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return ad.mean_all(ad.abs_(pred - Tensor(target)))


def loss(kind: str, prediction: Tensor, target) -> Tensor:
    if kind == "cross-entropy":
        return cross_entropy(prediction, target)
    if kind == "mse":
        return mse(prediction, target)
    if kind == "mae":
        return mae(prediction, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def per_row_loss(kind: str, prediction: np.ndarray, target) -> np.ndarray:
    """Unreduced losses, one per row, for reward bookkeeping."""
    if kind == "cross-entropy":
        labels = np.asarray(target, dtype=np.int64).reshape(-1)
        z = prediction - prediction.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return lse - z[np.arange(len(labels)), labels]
    diff = prediction - np.asarray(target, dtype=np.float64)
    if kind == "mse":
        return (diff ** 2).mean(axis=1)
    if kind == "mae":
        return np.abs(diff).mean(axis=1)
    raise ValueError(f"unknown loss kind {kind!r}")
