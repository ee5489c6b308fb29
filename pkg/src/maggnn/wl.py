"""Exact 1-WL colour refinement and other non-learned expressivity oracles."""
from __future__ import annotations

import hashlib
import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetError, InvalidParameterError
from .graph import Graph, MarkedGraph, NodeTuple, mark

DEFAULT_BUDGET = 10**6


def _digest(s: str) -> str:
    return hashlib.blake2b(s.encode(), digest_size=10).hexdigest()


@dataclass(frozen=True)
class ColorHistogram:
    counts: dict[str, int]
    iterations: int

    @property
    def num_colors(self) -> int:
        return len(self.counts)

    @property
    def hash(self) -> str:
        body = ";".join(f"{c}:{n}" for c, n in sorted(self.counts.items()))
        return _digest(body)

    def sorted_counts(self) -> list[int]:
        return sorted(self.counts.values(), reverse=True)

    def __eq__(self, other) -> bool:
        return isinstance(other, ColorHistogram) and self.counts == other.counts

    def __hash__(self) -> int:
        return hash(self.hash)


def _initial_colors(g: Graph | MarkedGraph) -> list[str]:
    feats = g.wl_features() if isinstance(g, MarkedGraph) else g.features
    if feats is None or feats.shape[1] == 0:
        return [_digest("init")] * g.num_nodes
    return [_digest("init|" + ",".join(repr(float(x)) for x in row)) for row in feats]


def wl_colorings(g: Graph | MarkedGraph, max_iters: int | None = None) -> list[list[str]]:
    """Colourings after each refinement round, starting with the initial one.

    Colour ids are digests of (own colour, sorted neighbour colours), so they
    are comparable across graphs and invariant under relabelling.
    """
    n = g.num_nodes
    if max_iters is None:
        max_iters = max(n, 1)
    if max_iters < 1:
        raise InvalidParameterError("max_iters must be >= 1")
    nbrs = g.neighbors
    colors = _initial_colors(g)
    history = [colors]
    for _ in range(max_iters):
        new = [_digest(colors[v] + "|" + ",".join(sorted(colors[u] for u in nbrs[v])))
               for v in range(n)]
        history.append(new)
        stable = len(set(new)) == len(set(colors))
        colors = new
        if stable:
            break
    return history


def wl_refine(g: Graph | MarkedGraph, max_iters: int | None = None) -> ColorHistogram:
    history = wl_colorings(g, max_iters)
    return ColorHistogram(dict(Counter(history[-1])), len(history) - 1)


def distinguishable(g1: Graph | MarkedGraph, g2: Graph | MarkedGraph,
                    max_iters: int | None = None) -> bool:
    if max_iters is None:
        max_iters = max(g1.num_nodes, g2.num_nodes, 1)
    return wl_refine(g1, max_iters) != wl_refine(g2, max_iters)


def all_tuples(num_nodes: int, k: int):
    return itertools.product(range(num_nodes), repeat=k)


def _check_budget(num_nodes: int, k: int, budget: int) -> None:
    if k < 1:
        raise InvalidParameterError("k must be >= 1")
    if num_nodes ** k > budget:
        raise BudgetError(f"{num_nodes}^{k} tuples exceed budget {budget}")


def marked_histograms(g: Graph, k: int, max_iters: int | None = None,
                      budget: int = DEFAULT_BUDGET) -> dict[NodeTuple, ColorHistogram]:
    _check_budget(g.num_nodes, k, budget)
    return {t: wl_refine(mark(g, t), max_iters) for t in all_tuples(g.num_nodes, k)}


def brute_force_discriminative(g1: Graph, g2: Graph, k: int, max_iters: int | None = None,
                               budget: int = DEFAULT_BUDGET) -> set[NodeTuple]:
    """Tuples of ``g1`` whose marked copy differs from every marked copy of ``g2``."""
    _check_budget(g1.num_nodes, k, budget)
    _check_budget(g2.num_nodes, k, budget)
    if max_iters is None:
        max_iters = max(g1.num_nodes, g2.num_nodes, 1)
    seen = {h for h in marked_histograms(g2, k, max_iters, budget).values()}
    return {t for t, h in marked_histograms(g1, k, max_iters, budget).items() if h not in seen}


def count_cycles_per_node(graph: Graph, length: int) -> np.ndarray:
    """Number of simple cycles of exactly ``length`` nodes through each node.

    Each cycle is enumerated once: rooted at its smallest node, all other nodes
    larger than the root, and the second node smaller than the last.
    """
    if length not in (3, 4, 5, 6):
        raise InvalidParameterError(f"cycle length must be in 3..6, got {length}")
    nbrs = graph.neighbors
    counts = np.zeros(graph.num_nodes, dtype=np.int64)

    def extend(path: list[int], on_path: set[int]) -> None:
        root, last = path[0], path[-1]
        if len(path) == length:
            if root in nbrs[last] and path[1] < path[-1]:
                for v in path:
                    counts[v] += 1
            return
        for w in nbrs[last]:
            if w > root and w not in on_path:
                path.append(w)
                on_path.add(w)
                extend(path, on_path)
                on_path.discard(w)
                path.pop()

    for s in range(graph.num_nodes):
        extend([s], {s})
    return counts


def cycle_count_targets(graph: Graph, lengths: Sequence[int] = (3, 4, 5, 6)) -> np.ndarray:
    """Per-node count matrix of shape (num_nodes, len(lengths))."""
    return np.stack([count_cycles_per_node(graph, L) for L in lengths], axis=1).astype(np.float64)


def full_tuple_score_scan(g: Graph, scorer: Callable[[MarkedGraph], float], k: int,
                          budget: int = DEFAULT_BUDGET, with_tuples: bool = False):
    """Score every k-tuple marking of ``g``; scores come back sorted descending."""
    _check_budget(g.num_nodes, k, budget)
    scored = [(float(scorer(mark(g, t))), t) for t in all_tuples(g.num_nodes, k)]
    scored.sort(key=lambda st: -st[0])
    if with_tuples:
        return scored
    return [s for s, _ in scored]
