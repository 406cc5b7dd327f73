import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronlab import oracles
from kronlab.errors import InvalidIndex, IsolatedNode, ParseError
from kronlab.graph import (
    Graph,
    RandomWalk,
    RawWeights,
    RowStochastic,
    SymNormalized,
    aggregation_matrix,
    erdos_renyi,
    format_edge_list,
    laplacian,
    largest_scc,
    load_edge_list,
    row_softmax,
    save_edge_list,
    sym_incidence,
    sym_normalized,
)
from kronlab.linalg import sym_eig


def path(n):
    return Graph.from_pairs(n, [(i, i + 1) for i in range(n - 1)])


# -- construction and I/O --------------------------------------------------------


def test_load_path_graph():
    g = load_edge_list("3 2\n0 1\n1 2\n")
    assert g.n == 3 and not g.directed
    assert [e[:2] for e in g.edges] == [(0, 1), (1, 2)]


def test_load_handles_comments_weights_and_direction():
    g = load_edge_list("# demo\n3 2 directed\n0 1 0.5  # heavy\n\n2 0\n")
    assert g.directed
    assert g.edges == ((0, 1, 0.5), (2, 0, 1.0))


@pytest.mark.parametrize(
    "text, line",
    [
        ("3 1\n0 0\n", 2),
        ("3 2\n0 1\n1 0\n", 3),
        ("3 1\n0 x\n", 2),
        ("3 1 sideways\n0 1\n", 1),
        ("3\n", 1),
        ("2 1\n0 1 2 3\n", 2),
    ],
)
def test_load_rejects_bad_lines_with_line_number(text, line):
    with pytest.raises(ParseError) as err:
        load_edge_list(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_load_rejects_out_of_range_index():
    with pytest.raises(InvalidIndex):
        load_edge_list("3 1\n0 3\n")


def test_load_rejects_count_mismatch():
    with pytest.raises(ParseError):
        load_edge_list("3 2\n0 1\n")
    with pytest.raises(ParseError):
        load_edge_list("")


def test_graph_rejects_self_loops_and_duplicates():
    with pytest.raises(ValueError):
        Graph.from_pairs(3, [(1, 1)])
    with pytest.raises(ValueError):
        Graph.from_pairs(3, [(0, 1), (1, 0)])
    Graph.from_pairs(3, [(0, 1), (1, 0)], directed=True)


def test_er_file_round_trip():
    g = erdos_renyi(20, 0.2, 11)
    buf = io.StringIO()
    save_edge_list(g, buf)
    assert load_edge_list(buf.getvalue()) == g
    assert format_edge_list(load_edge_list(buf.getvalue())) == buf.getvalue()


def test_weighted_round_trip_keeps_exact_weights():
    g = Graph.from_pairs(3, [(0, 1), (1, 2)], weights=[0.1, 1 / 3])
    assert load_edge_list(format_edge_list(g)) == g


# -- generation -----------------------------------------------------------------------


def test_er_extremes():
    assert erdos_renyi(10, 0.0, 0).num_edges == 0
    full = erdos_renyi(4, 1.0, 0)
    assert full.num_edges == 6 and full.is_connected()
    assert erdos_renyi(4, 1.0, 0, directed=True).num_edges == 12


def test_er_is_deterministic_per_seed():
    assert erdos_renyi(20, 0.2, 5) == erdos_renyi(20, 0.2, 5)
    assert erdos_renyi(20, 0.2, 5) != erdos_renyi(20, 0.2, 6)


def test_er_rejects_bad_probability():
    with pytest.raises(ValueError):
        erdos_renyi(5, 1.5, 0)


def test_er_edge_counts_follow_binomial():
    lo, hi = 19, 57
    mass = oracles.binomial_interval_mass(190, 0.2, lo, hi)
    assert mass > 0.999
    inside = sum(lo <= erdos_renyi(20, 0.2, s).num_edges <= hi for s in range(1000))
    assert inside >= 990
    mean = np.mean([erdos_renyi(20, 0.2, s).num_edges for s in range(1000)])
    assert abs(mean - 38.0) < 0.5


# -- components --------------------------------------------------------------------------


def test_largest_scc_tie_prefers_node_zero():
    g = Graph.from_pairs(6, [(3, 4), (4, 5), (5, 3), (0, 1), (1, 2), (2, 0)])
    h = largest_scc(g)
    assert h.n == 3
    assert sorted(e[:2] for e in h.edges) == [(0, 1), (0, 2), (1, 2)] or len(h.edges) == 3
    g2 = Graph.from_pairs(6, [(0, 4), (4, 5), (5, 0), (1, 2), (2, 3), (3, 1)])
    h2 = largest_scc(g2)
    assert {(s, d) for s, d, _ in h2.edges} == {(0, 1), (1, 2), (2, 0)}


def test_largest_scc_of_connected_graph_is_unchanged():
    g = erdos_renyi(10, 1.0, 0)
    assert largest_scc(g) == g


@pytest.mark.parametrize("seed", range(5))
def test_largest_scc_matches_reachability_oracle(seed):
    g = erdos_renyi(30, 0.06, seed, directed=True)
    reach = oracles.reachability(g.n, [(s, d) for s, d, _ in g.edges])
    mutual = reach & reach.T
    comps = {frozenset(np.flatnonzero(row).tolist()) for row in mutual}
    best = max(comps, key=lambda c: (len(c), -min(c)))
    h = largest_scc(g)
    assert h.n == len(best)
    keep = sorted(best)
    expected = {(keep.index(s), keep.index(d)) for s, d, _ in g.edges if s in best and d in best}
    assert {(s, d) for s, d, _ in h.edges} == expected


# -- aggregations ----------------------------------------------------------------------


def test_sym_normalized_path_two():
    assert np.array_equal(sym_normalized(path(2)), [[0.0, 1.0], [1.0, 0.0]])


def test_sym_normalized_star():
    a = sym_normalized(Graph.from_pairs(4, [(0, 1), (0, 2), (0, 3)]))
    expected = np.zeros((4, 4))
    expected[0, 1:] = expected[1:, 0] = 1 / np.sqrt(3)
    assert np.allclose(a, expected, atol=1e-15)


def test_isolated_node_is_an_error():
    g = Graph.from_pairs(3, [(0, 1)])
    with pytest.raises(IsolatedNode):
        aggregation_matrix(g, SymNormalized())
    with pytest.raises(IsolatedNode):
        laplacian(g, RandomWalk())


def test_row_softmax_equal_logits_on_path_middle():
    g = path(3)
    a = aggregation_matrix(g, RowStochastic(np.zeros(4)))
    assert np.allclose(a[1], [0.5, 0.0, 0.5])
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.05), st.floats(0.1, 30.0))
def test_row_softmax_floor_and_stochasticity(seed, eps, spread):
    rng = np.random.default_rng(seed)
    g = largest_scc(erdos_renyi(12, 0.4, rng))
    edges = g.message_edges()
    logits = rng.normal(0.0, spread, len(edges))
    dense, probs, raw = row_softmax(g.n, edges, logits, eps)
    assert np.allclose(dense.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= eps - 1e-15)
    assert np.all((dense != 0) <= (g.adjacency() != 0))
    assert np.allclose(np.bincount(edges[:, 1], weights=raw, minlength=g.n), 1.0)


def test_row_softmax_floor_keeps_order_of_free_entries():
    edges = np.array([[1, 0], [2, 0], [3, 0]])
    _, probs, raw = row_softmax(4, edges, np.array([0.0, -20.0, -1.0]), 0.01)
    assert probs[1] == pytest.approx(0.01)
    assert probs[0] / probs[2] == pytest.approx(raw[0] / raw[2])
    assert probs.sum() == pytest.approx(1.0)


def test_row_softmax_rejects_impossible_floor():
    with pytest.raises(ValueError):
        row_softmax(3, np.array([[1, 0], [2, 0]]), np.zeros(2), 0.6)


def test_raw_weights_placement():
    g = path(3)
    a = aggregation_matrix(g, RawWeights(np.array([1.0, 2.0, 3.0, 4.0])))
    # message order: (0->1), (1->0), (1->2), (2->1); entry [dst, src]
    assert a[1, 0] == 1.0 and a[0, 1] == 2.0 and a[2, 1] == 3.0 and a[1, 2] == 4.0


def test_laplacians_of_path_two():
    expected = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.array_equal(laplacian(path(2), SymNormalized()), expected)
    assert np.array_equal(laplacian(path(2), RandomWalk()), expected)


def test_random_walk_laplacian_kills_constants():
    g = largest_scc(erdos_renyi(10, 0.4, 3))
    assert np.linalg.norm(laplacian(g, RandomWalk()) @ np.ones(g.n)) <= 1e-12


def test_triangle_sym_laplacian_spectrum():
    tri = Graph.from_pairs(3, [(0, 1), (1, 2), (0, 2)])
    lam = sorted(sym_eig(laplacian(tri)).eigenvalues)
    assert np.allclose(lam, [0.0, 1.5, 1.5], atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_sym_laplacian_is_identity_minus_aggregation(seed):
    g = largest_scc(erdos_renyi(14, 0.3, seed))
    assert np.array_equal(laplacian(g), np.eye(g.n) - aggregation_matrix(g))
    lam = sym_eig(sym_normalized(g)).eigenvalues
    assert abs(lam[0] - 1.0) <= 1e-10
    assert np.all(np.abs(lam) <= 1 + 1e-10)
    assert abs(lam[1]) < 1 - 1e-8 or lam[-1] <= -1 + 1e-9  # simple unless bipartite


def test_incidence_factorises_laplacian():
    g = largest_scc(erdos_renyi(12, 0.4, 9))
    b = sym_incidence(g)
    assert np.allclose(b.T @ b, laplacian(g), atol=1e-14)


def test_relabel_permutes_adjacency():
    g = erdos_renyi(6, 0.5, 2)
    perm = [3, 0, 5, 1, 4, 2]
    p = np.eye(6)[perm].T  # column i has a one at row perm[i]
    assert np.array_equal(g.relabel(perm).adjacency(), p @ g.adjacency() @ p.T)
