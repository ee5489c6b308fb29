"""Labelled graph datasets: instances, builders and newline-delimited JSON IO."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidParameterError
from .graph import (
    Graph, generate_csl, generate_cycle_union, generate_srg_pair, generate_supergraph,
    erdos_renyi, graph_from_dict, graph_to_dict, permute,
)

TASK_GRAPH_CLASS = "graph-class"
TASK_GRAPH_REG = "graph-reg"
TASK_NODE_REG = "node-reg"
TASKS = (TASK_GRAPH_CLASS, TASK_GRAPH_REG, TASK_NODE_REG)
SPLITS = ("train", "valid", "test")

CSL_SKIPS = (2, 3, 4, 5, 6, 9, 11, 12, 13, 16)


@dataclass(frozen=True, eq=False)
class DatasetInstance:
    graph: Graph
    target: object
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidParameterError(f"unknown split {self.split!r}")


@dataclass
class Dataset:
    name: str
    task: str
    num_outputs: int
    instances: list[DatasetInstance]

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidParameterError(f"unknown task {self.task!r}")
        for d in self.instances:
            check_target(self.task, self.num_outputs, d)

    def __len__(self):
        return len(self.instances)

    def split(self, name: str) -> list[DatasetInstance]:
        return [d for d in self.instances if d.split == name]

    @property
    def feature_dim(self) -> int:
        return self.instances[0].graph.feature_dim

    def class_counts(self) -> dict:
        if self.task != TASK_GRAPH_CLASS:
            return {}
        return dict(sorted(Counter(int(d.target) for d in self.instances).items()))


def check_target(task: str, num_outputs: int, d: DatasetInstance) -> None:
    if task == TASK_GRAPH_CLASS:
        t = d.target
        if isinstance(t, (bool, float)) or not isinstance(t, (int, np.integer)) or not 0 <= t < num_outputs:
            raise InvalidParameterError(f"class target {t!r} invalid for {num_outputs} classes")
    elif task == TASK_GRAPH_REG:
        if np.asarray(d.target, dtype=np.float64).shape != (num_outputs,):
            raise InvalidParameterError(f"graph-regression target must have length {num_outputs}")
    else:
        if np.asarray(d.target, dtype=np.float64).shape != (d.graph.num_nodes, num_outputs):
            raise InvalidParameterError("node-regression target must be (num_nodes, num_outputs)")


def stack_targets(task: str, targets: Sequence) -> np.ndarray:
    if task == TASK_GRAPH_CLASS:
        return np.asarray(targets, dtype=np.int64)
    if task == TASK_GRAPH_REG:
        return np.stack([np.asarray(t, dtype=np.float64) for t in targets])
    return np.concatenate([np.asarray(t, dtype=np.float64) for t in targets], axis=0)


def _random_perm_graph(g: Graph, rng: np.random.Generator) -> Graph:
    return permute(g, rng.permutation(g.num_nodes))


def assign_splits(n: int, rng: np.random.Generator, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else ("valid" if rank < n_train + n_valid else "test")
    return out


def csl_dataset(n: int = 41, skips: Sequence[int] = CSL_SKIPS, per_class: int = 15, seed: int = 0,
                test_per_class: int = 5) -> Dataset:
    """Ten isomorphism classes of CSL graphs, each instance a random relabelling."""
    rng = np.random.default_rng(seed)
    out = []
    for label, s in enumerate(skips):
        base = generate_csl(n, s)
        for i in range(per_class):
            split = "test" if i >= per_class - test_per_class else "train"
            out.append(DatasetInstance(_random_perm_graph(base, rng), label, split))
    return Dataset("csl", TASK_GRAPH_CLASS, len(skips), out)


def supergraph_dataset(n: int = 3, num_positive: int = 100, num_negative: int = 100, seed: int = 0,
                       test_fraction: float = 0.2) -> Dataset:
    """Positive (label 1) and negative (label 0) super-graphs."""
    rng = np.random.default_rng(seed)
    out = []
    specs = [("positive", 1)] * num_positive + [("negative", 0)] * num_negative
    seeds = rng.integers(0, 2**31 - 1, size=len(specs))
    split_rng = np.random.default_rng(seed + 1)
    test = set(split_rng.permutation(len(specs))[: int(round(test_fraction * len(specs)))].tolist())
    for i, ((sign, label), s) in enumerate(zip(specs, seeds)):
        g, _ = generate_supergraph(n, int(s), sign)
        out.append(DatasetInstance(g, label, "test" if i in test else "train"))
    return Dataset(f"supergraph{n}", TASK_GRAPH_CLASS, 2, out)


def srg_pair_dataset(copies: int = 1, seed: int = 0) -> Dataset:
    """Shrikhande (label 0) versus rook 4x4 (label 1), used for train and test alike."""
    rng = np.random.default_rng(seed)
    s, r = generate_srg_pair()
    out = []
    for i in range(copies):
        for label, g in ((0, s), (1, r)):
            gi = g if i == 0 else _random_perm_graph(g, rng)
            out.append(DatasetInstance(gi, label, "train"))
    return Dataset("srg-pair", TASK_GRAPH_CLASS, 2, out)


def exp_like_dataset(seed: int = 0, permutations: int = 5) -> Dataset:
    """1-WL-equivalent non-isomorphic pairs (cycle unions, 8-node CSLs)."""
    rng = np.random.default_rng(seed)
    pairs = [
        (generate_cycle_union((3, 6)), generate_cycle_union((3, 3, 3))),
        (generate_cycle_union((4, 4)), generate_cycle_union((8,))),
        (generate_cycle_union((3, 5)), generate_cycle_union((4, 4))),
        (generate_cycle_union((3, 4)), generate_cycle_union((7,))),
        (generate_csl(8, 2), generate_csl(8, 3)),
    ]
    out = []
    for a, b in pairs:
        for i in range(permutations):
            for label, g in ((0, a), (1, b)):
                out.append(DatasetInstance(_random_perm_graph(g, rng), label,
                                           "test" if i == permutations - 1 else "train"))
    return Dataset("exp-like", TASK_GRAPH_CLASS, 2, out)


def cycle_dataset(num_graphs: int = 200, n: int = 18, p: float = 0.18, seed: int = 0,
                  lengths: Sequence[int] = (3, 4, 5, 6)) -> Dataset:
    """Erdos-Renyi graphs with exact per-node cycle counts as targets."""
    from .wl import cycle_count_targets

    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=num_graphs)
    splits = assign_splits(num_graphs, np.random.default_rng(seed + 1))
    out = []
    for s, split in zip(seeds, splits):
        g = erdos_renyi(n, p, int(s))
        out.append(DatasetInstance(g, cycle_count_targets(g, lengths), split))
    return Dataset("cycles", TASK_NODE_REG, len(lengths), out)


def select_outputs(ds: Dataset, columns: Sequence[int]) -> Dataset:
    """Keep only some regression target columns (e.g. the 3-cycle column)."""
    if ds.task == TASK_GRAPH_CLASS:
        raise InvalidParameterError("cannot select outputs of a classification dataset")
    cols = list(columns)
    inst = [DatasetInstance(d.graph, np.asarray(d.target)[..., cols], d.split) for d in ds.instances]
    return Dataset(ds.name, ds.task, len(cols), inst)


def target_stats(ds: Dataset, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    t = stack_targets(ds.task, [d.target for d in ds.split(split)])
    t = t.reshape(-1, ds.num_outputs)
    std = t.std(axis=0)
    return t.mean(axis=0), np.where(std > 0, std, 1.0)


def standardize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    inst = [DatasetInstance(d.graph, (np.asarray(d.target, dtype=np.float64) - mean) / std, d.split)
            for d in ds.instances]
    return Dataset(ds.name, ds.task, ds.num_outputs, inst)


def _target_to_json(task: str, target):
    if task == TASK_GRAPH_CLASS:
        return int(target)
    return np.asarray(target, dtype=np.float64).tolist()


def write_jsonl(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for d in ds.instances:
            rec = graph_to_dict(d.graph, _target_to_json(ds.task, d.target))
            rec["split"] = d.split
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path, name: str, task: str, num_outputs: int) -> Dataset:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            g, target = graph_from_dict(rec)
            if task != TASK_GRAPH_CLASS:
                target = np.asarray(target, dtype=np.float64)
            out.append(DatasetInstance(g, target, rec.get("split", "train")))
    return Dataset(name, task, num_outputs, out)


def iter_records(ds: Dataset) -> Iterable[dict]:
    for d in ds.instances:
        yield graph_to_dict(d.graph, _target_to_json(ds.task, d.target))
