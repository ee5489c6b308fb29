"""Graphs, node-tuple marking and synthetic graph generators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidParameterError, InvalidPermutationError, InvalidTupleError

NodeTuple = tuple[int, ...]

C_PLUS = 1.0
C_MINUS = 0.0


def _canonical_edges(num_nodes: int, edges: Iterable[Sequence[int]]) -> tuple[tuple[int, int], ...]:
    out = set()
    for e in edges:
        u, v = int(e[0]), int(e[1])
        if u == v:
            raise InvalidParameterError(f"self-loop on node {u}")
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise InvalidParameterError(f"edge ({u}, {v}) out of range for {num_nodes} nodes")
        out.add((u, v) if u < v else (v, u))
    return tuple(sorted(out))


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with optional dense node features.

    Duplicate edges collapse; self-loops are rejected. Instances are treated
    as immutable once built.
    """

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    features: np.ndarray | None = None

    def __init__(self, num_nodes: int, edges: Iterable[Sequence[int]] = (),
                 features: np.ndarray | None = None):
        if num_nodes < 0:
            raise InvalidParameterError("num_nodes must be non-negative")
        object.__setattr__(self, "num_nodes", int(num_nodes))
        object.__setattr__(self, "edges", _canonical_edges(num_nodes, edges))
        if features is not None:
            features = np.array(features, dtype=np.float64, copy=True)
            if features.ndim != 2 or features.shape[0] != num_nodes:
                raise InvalidParameterError(
                    f"features must have shape ({num_nodes}, d), got {features.shape}")
            features.setflags(write=False)
        object.__setattr__(self, "features", features)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        return tuple(tuple(sorted(x)) for x in nbrs)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self.neighbors], dtype=np.int64)

    @cached_property
    def sparse_adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        if not self.edges:
            return sp.csr_matrix((n, n), dtype=np.float64)
        e = np.asarray(self.edges, dtype=np.int64)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def adjacency(self) -> np.ndarray:
        return self.sparse_adjacency.toarray()

    def feature_matrix(self) -> np.ndarray:
        """Node features fed to a network; featureless graphs get a constant column."""
        if self.features is None:
            return np.ones((self.num_nodes, 1), dtype=np.float64)
        return self.features

    @property
    def feature_dim(self) -> int:
        return 1 if self.features is None else self.features.shape[1]

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    def same_as(self, other: "Graph") -> bool:
        """Structural and feature equality (not isomorphism)."""
        if self.num_nodes != other.num_nodes or self.edges != other.edges:
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


@dataclass(frozen=True, eq=False)
class MarkedGraph:
    """A graph copy with a node tuple encoded as extra feature columns."""

    base: Graph
    tuple: NodeTuple
    marking: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.tuple)

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def neighbors(self):
        return self.base.neighbors

    def feature_matrix(self) -> np.ndarray:
        return np.concatenate([self.base.feature_matrix(), self.marking], axis=1)

    def wl_features(self) -> np.ndarray:
        """Raw features plus marking, without the constant column of featureless graphs."""
        if self.base.features is None:
            return self.marking
        return np.concatenate([self.base.features, self.marking], axis=1)


def validate_tuple(graph: Graph, tup: Sequence[int]) -> NodeTuple:
    tup = tuple(int(v) for v in tup)
    if len(tup) < 1:
        raise InvalidTupleError("node tuple must contain at least one node")
    for v in tup:
        if not 0 <= v < graph.num_nodes:
            raise InvalidTupleError(f"node id {v} out of range for {graph.num_nodes}-node graph")
    return tup


def marking_matrix(num_nodes: int, tup: Sequence[int], c_plus: float = C_PLUS,
                   c_minus: float = C_MINUS) -> np.ndarray:
    out = np.full((num_nodes, len(tup)), c_minus, dtype=np.float64)
    out[np.asarray(tup, dtype=np.int64), np.arange(len(tup))] = c_plus
    return out


def mark(graph: Graph, tup: Sequence[int], c_plus: float = C_PLUS,
         c_minus: float = C_MINUS) -> MarkedGraph:
    """Attach the node-marking block for ``tup``.

    Entry (l, j) is ``c_plus`` iff node l sits at position j of the tuple, so a
    node repeated at several positions carries several ``c_plus`` entries.
    """
    tup = validate_tuple(graph, tup)
    m = marking_matrix(graph.num_nodes, tup, c_plus, c_minus)
    m.setflags(write=False)
    return MarkedGraph(graph, tup, m)


def permute(graph: Graph, perm: Sequence[int]) -> Graph:
    """Relabel node ``u`` as ``perm[u]``; feature rows move with their node."""
    perm = np.asarray(perm, dtype=np.int64)
    n = graph.num_nodes
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidPermutationError(f"not a bijection on 0..{n - 1}")
    edges = [(perm[u], perm[v]) for u, v in graph.edges]
    feats = None
    if graph.features is not None:
        feats = np.empty_like(graph.features)
        feats[perm] = graph.features
    return Graph(n, edges, feats)


def permute_tuple(tup: Sequence[int], perm: Sequence[int]) -> NodeTuple:
    return tuple(int(perm[v]) for v in tup)


def generate_csl(n: int, skip: int) -> Graph:
    """Circular skip-link graph: an n-ring plus chords i -- i+skip."""
    if skip == 1:
        raise InvalidParameterError("skip=1 duplicates the ring edges")
    if n < 5 or not (2 <= skip < n / 2):
        raise InvalidParameterError(f"need n >= 5 and 2 <= skip < n/2, got n={n}, skip={skip}")
    edges = [(i, (i + 1) % n) for i in range(n)]
    edges += [(i, (i + skip) % n) for i in range(n)]
    return Graph(n, edges)


def generate_cycle_union(cycle_lengths: Sequence[int]) -> Graph:
    edges = []
    start = 0
    for length in cycle_lengths:
        if length < 3:
            raise InvalidParameterError(f"cycle length must be >= 3, got {length}")
        edges += [(start + i, start + (i + 1) % length) for i in range(length)]
        start += length
    return Graph(start, edges)


BLOCK_A = "A"
BLOCK_B = "B"
_BLOCK_SKIP = {BLOCK_A: 2, BLOCK_B: 3}
BLOCK_SIZE = 8


def supergraph_sequence(n: int, seed, sign: str) -> list[str]:
    if n < 1:
        raise InvalidParameterError("n must be >= 1")
    if sign not in ("positive", "negative"):
        raise InvalidParameterError(f"sign must be 'positive' or 'negative', got {sign!r}")
    rng = np.random.default_rng(seed)
    half = [BLOCK_A] * n + [BLOCK_B] * n
    half = [half[i] for i in rng.permutation(2 * n)]
    if sign == "positive":
        return half + half
    flipped = [BLOCK_B if b == BLOCK_A else BLOCK_A for b in half]
    return half + flipped


def generate_supergraph(n: int, seed, sign: str) -> tuple[Graph, list[str]]:
    """Ring of 4n CSL(8,2)/CSL(8,3) blocks, consecutive blocks fully joined.

    Positive graphs repeat the first half (opposite blocks share a type),
    negative graphs append its type-inverse.
    """
    blocks = supergraph_sequence(n, seed, sign)
    nb = len(blocks)
    edges = []
    for b, kind in enumerate(blocks):
        off = b * BLOCK_SIZE
        edges += [(off + u, off + v) for u, v in generate_csl(BLOCK_SIZE, _BLOCK_SKIP[kind]).edges]
    for b in range(nb):
        o1 = b * BLOCK_SIZE
        o2 = ((b + 1) % nb) * BLOCK_SIZE
        edges += [(o1 + i, o2 + j) for i in range(BLOCK_SIZE) for j in range(BLOCK_SIZE)]
    return Graph(nb * BLOCK_SIZE, edges), blocks


def supergraph_block_of(node: int) -> int:
    return node // BLOCK_SIZE


def generate_srg_pair() -> tuple[Graph, Graph]:
    """Shrikhande graph and the 4x4 rook's graph, both SRG(16, 6, 2, 2)."""
    diffs = {(1, 0), (3, 0), (0, 1), (0, 3), (1, 1), (3, 3)}

    def idx(a, b):
        return 4 * (a % 4) + (b % 4)

    shrikhande = []
    rook = []
    for a in range(4):
        for b in range(4):
            for c in range(4):
                for d in range(4):
                    u, v = idx(a, b), idx(c, d)
                    if u >= v:
                        continue
                    if ((c - a) % 4, (d - b) % 4) in diffs:
                        shrikhande.append((u, v))
                    if a == c or b == d:
                        rook.append((u, v))
    return Graph(16, shrikhande), Graph(16, rook)


def erdos_renyi(n: int, p: float, seed) -> Graph:
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph(n, zip(iu[keep].tolist(), ju[keep].tolist()))


def is_regular(graph: Graph) -> bool:
    d = graph.degrees
    return len(d) == 0 or bool(np.all(d == d[0]))


def common_neighbor_counts(graph: Graph) -> np.ndarray:
    a = graph.adjacency()
    return a @ a


def graph_to_dict(graph: Graph, target=None) -> dict:
    return {
        "n": graph.num_nodes,
        "edges": [list(e) for e in graph.edges],
        "features": None if graph.features is None else graph.features.tolist(),
        "target": target,
    }


def graph_from_dict(d: dict) -> tuple[Graph, object]:
    feats = d.get("features")
    g = Graph(d["n"], d.get("edges", ()), None if feats is None else np.asarray(feats, dtype=np.float64))
    return g, d.get("target")


def num_tuples(graph: Graph, k: int) -> int:
    return int(math.pow(graph.num_nodes, k))
