"""Disjoint-union batches of (possibly marked) graphs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..graph import Graph, MarkedGraph


def _edge_arrays(g: Graph) -> np.ndarray:
    if not g.edges:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(g.edges, dtype=np.int64)


@dataclass
class GraphBatch:
    features: np.ndarray          # (total_nodes, d)
    adjacency: sp.csr_matrix      # block diagonal, symmetric
    pooling: sp.csr_matrix        # (num_graphs, total_nodes) indicator
    offsets: np.ndarray           # first node row of each graph
    sizes: np.ndarray

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)

    @property
    def total_nodes(self) -> int:
        return self.features.shape[0]


def make_batch(graphs: Sequence[Graph | MarkedGraph]) -> GraphBatch:
    sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    total = int(sizes.sum())
    feats = np.concatenate([g.feature_matrix() for g in graphs], axis=0)
    rows, cols = [], []
    for g, off in zip(graphs, offsets):
        base = g.base if isinstance(g, MarkedGraph) else g
        e = _edge_arrays(base) + off
        rows.append(e[:, 0])
        cols.append(e[:, 1])
    r = np.concatenate(rows + cols)
    c = np.concatenate(cols + rows)
    adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(total, total))
    owner = np.repeat(np.arange(len(graphs)), sizes)
    pool = sp.csr_matrix((np.ones(total), (owner, np.arange(total))), shape=(len(graphs), total))
    return GraphBatch(feats, adj, pool, offsets, sizes)
