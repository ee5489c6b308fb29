import itertools
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maggnn.errors import InvalidParameterError, InvalidPermutationError, InvalidTupleError
from maggnn.graph import (
    Graph, common_neighbor_counts, erdos_renyi, generate_csl, generate_cycle_union, generate_srg_pair,
    generate_supergraph, graph_from_dict, graph_to_dict, is_regular, mark, permute, permute_tuple,
    supergraph_sequence,
)


def to_nx(g):
    h = nx.Graph()
    h.add_nodes_from(range(g.num_nodes))
    h.add_edges_from(g.edges)
    return h


def test_graph_rejects_self_loops_and_dedupes():
    with pytest.raises(InvalidParameterError):
        Graph(3, [(0, 0)])
    g = Graph(3, [(0, 1), (1, 0), (1, 2)])
    assert g.num_edges == 2
    a = g.adjacency()
    assert np.array_equal(a, a.T)


def test_graph_rejects_out_of_range_edge():
    with pytest.raises(InvalidParameterError):
        Graph(2, [(0, 2)])


def test_mark_examples():
    g = Graph(3, [(0, 1), (1, 2)])
    mg = mark(g, (2, 0))
    assert mg.marking.tolist() == [[0, 1], [0, 0], [1, 0]]
    mg = mark(g, (1, 1))
    assert mg.marking.tolist() == [[0, 0], [1, 1], [0, 0]]
    mg = mark(Graph(2, [(0, 1)]), (0,))
    assert mg.marking.tolist() == [[1], [0]]


def test_mark_appends_to_existing_features():
    feats = np.array([[0.5, 2.0], [1.0, -1.0]])
    g = Graph(2, [(0, 1)], feats)
    x = mark(g, (1,)).feature_matrix()
    assert x.shape == (2, 3)
    assert np.array_equal(x[:, :2], feats)
    assert x[:, 2].tolist() == [0.0, 1.0]


def test_mark_custom_values():
    mg = mark(Graph(3), (0, 2), c_plus=2.5, c_minus=-1.0)
    assert mg.marking.tolist() == [[2.5, -1.0], [-1.0, -1.0], [-1.0, 2.5]]


def test_mark_invalid_tuple():
    with pytest.raises(InvalidTupleError):
        mark(Graph(3), (3,))
    with pytest.raises(InvalidTupleError):
        mark(Graph(3), ())


def test_csl_examples():
    g = generate_csl(8, 2)
    assert g.num_nodes == 8 and g.num_edges == 16
    assert set(g.degrees.tolist()) == {4}
    h = generate_csl(8, 3)
    assert h.num_edges == 16 and is_regular(h)
    assert not nx.is_isomorphic(to_nx(g), to_nx(h))
    big = generate_csl(41, 2)
    assert big.num_nodes == 41 and big.num_edges == 82


@pytest.mark.parametrize("skip", [1, 0, 4, 5])
def test_csl_invalid_skip(skip):
    with pytest.raises(InvalidParameterError):
        generate_csl(8, skip)


def test_cycle_unions():
    g = generate_cycle_union((3, 3, 3))
    assert g.num_nodes == 9 and g.num_edges == 9
    assert nx.number_connected_components(to_nx(g)) == 3
    h = generate_cycle_union((3, 6))
    assert h.num_nodes == 9 and sorted(len(c) for c in nx.connected_components(to_nx(h))) == [3, 6]
    c4 = generate_cycle_union((4,))
    assert c4.num_nodes == 4 and set(c4.degrees.tolist()) == {2}
    with pytest.raises(InvalidParameterError):
        generate_cycle_union((2,))


def test_supergraph_n1_edge_count():
    for sign in ("positive", "negative"):
        g, blocks = generate_supergraph(1, 7, sign)
        assert len(blocks) == 4
        assert g.num_nodes == 32
        assert g.num_edges == 4 * 16 + 4 * 64


def test_supergraph_block_symmetry():
    for seed in range(20):
        pos = supergraph_sequence(3, seed, "positive")
        neg = supergraph_sequence(3, seed, "negative")
        assert all(pos[i] == pos[(i + 6) % 12] for i in range(12))
        assert all(neg[i] != neg[(i + 6) % 12] for i in range(12))
        assert pos.count("A") == pos.count("B") == 6


def test_supergraph_blocks_are_csl():
    g, blocks = generate_supergraph(2, 3, "positive")
    h = to_nx(g)
    for b, kind in enumerate(blocks):
        sub = h.subgraph(range(8 * b, 8 * b + 8))
        ref = to_nx(generate_csl(8, 2 if kind == "A" else 3))
        assert nx.is_isomorphic(sub, ref)


def test_supergraph_deterministic():
    a, _ = generate_supergraph(2, 11, "negative")
    b, _ = generate_supergraph(2, 11, "negative")
    assert a.same_as(b)


def test_srg_pair_parameters():
    s, r = generate_srg_pair()
    for g in (s, r):
        assert g.num_nodes == 16 and g.num_edges == 48
        assert set(g.degrees.tolist()) == {6}
        cn = common_neighbor_counts(g)
        a = g.adjacency()
        off = ~np.eye(16, dtype=bool)
        assert set(cn[(a == 1)].tolist()) == {2}
        assert set(cn[(a == 0) & off].tolist()) == {2}
    assert not nx.is_isomorphic(to_nx(s), to_nx(r))


def test_permute_examples():
    g = generate_csl(8, 2)
    assert permute(g, np.arange(8)).same_as(g)
    tri = Graph(3, [(0, 1), (1, 2), (0, 2)])
    for p in itertools.permutations(range(3)):
        assert permute(tri, p).same_as(tri)
    rot = [(i + 1) % 8 for i in range(8)]
    assert permute(g, rot).edge_set() == g.edge_set()


def test_permute_rejects_non_bijection():
    with pytest.raises(InvalidPermutationError):
        permute(Graph(3), [0, 0, 1])
    with pytest.raises(InvalidPermutationError):
        permute(Graph(3), [0, 1])


def test_permute_moves_features():
    feats = np.arange(6, dtype=float).reshape(3, 2)
    g = Graph(3, [(0, 1)], feats)
    p = permute(g, [2, 0, 1])
    assert np.array_equal(p.features[2], feats[0])
    assert (0, 2) in p.edge_set()


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 12), st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_mark_permute_consistency(n, seed, k):
    rng = np.random.default_rng(seed)
    g = erdos_renyi(n, 0.4, seed)
    perm = rng.permutation(n)
    tup = tuple(rng.integers(0, n, size=k).tolist())
    lhs = mark(permute(g, perm), permute_tuple(tup, perm)).feature_matrix()
    rhs = mark(g, tup).feature_matrix()
    expected = np.empty_like(rhs)
    expected[perm] = rhs
    assert np.array_equal(lhs, expected)


def test_json_round_trip():
    g = Graph(4, [(0, 1), (2, 3)], np.ones((4, 2)))
    d = graph_to_dict(g, target=3)
    assert set(d) == {"n", "edges", "features", "target"}
    back, target = graph_from_dict(json.loads(json.dumps(d)))
    assert back.same_as(g) and target == 3
    plain, _ = graph_from_dict({"n": 3, "edges": [[0, 1]], "features": None, "target": None})
    assert plain.features is None


def test_featureless_graph_has_constant_column():
    g = Graph(3, [(0, 1)])
    assert g.feature_matrix().tolist() == [[1.0], [1.0], [1.0]]
