import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from emagnn.graphs import (STATIC_METRICS, Graph, UndefinedCorrelationError, build_correlation, build_dtw,
                           build_euclidean, build_graph, build_knn, build_random, dtw_distance,
                           dtw_distance_matrix, euclidean_distances, gaussian_affinity, gcn_normalize,
                           graph_correlation, load_graph, normalize, power_iteration, save_graph, sparsify)

from oracles import dtw_bruteforce, gcn_loops, knn_edges, pearson, top_edges


def noise(V=8, T=40, seed=0):
    return np.random.default_rng(seed).normal(size=(V, T))


def edge_set(g: Graph) -> set[tuple[int, int]]:
    iu = np.triu_indices(g.V, 1)
    on = (g.weights[iu] > 0) | (g.weights.T[iu] > 0)
    return {(int(i), int(j)) for i, j, k in zip(*iu, on) if k}


# ------------------------------------------------------------------ Euclidean
def test_identical_rows_have_unit_affinity():
    x = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 5.0, 1.0]])
    g = build_euclidean(x)
    assert g.weights[0, 1] == 1.0


def test_three_four_five():
    d = euclidean_distances(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert d[0, 1] == pytest.approx(5.0)


def test_euclidean_affinity_range():
    w = build_euclidean(noise()).weights
    off = w[~np.eye(8, dtype=bool)]
    assert np.array_equal(w, w.T)
    assert np.all((off > 0) & (off <= 1)) and np.all(np.diag(w) == 0)


def test_affinity_monotone_in_distance():
    x = noise(6, 30, seed=3)
    d = euclidean_distances(x)
    w = gaussian_affinity(d)
    iu = np.triu_indices(6, 1)
    order = np.argsort(d[iu])
    assert np.all(np.diff(w[iu][order]) <= 0)


def test_euclidean_needs_two_variables():
    with pytest.raises(ValueError):
        build_euclidean(np.zeros((1, 5)))


# ------------------------------------------------------------------------ kNN
def test_knn_three_node_example():
    # 1-D positions 0, 1, -2: d(1,2)=1, d(1,3)=2, d(2,3)=3
    x = np.array([[0.0, 0.0], [1.0, 0.0], [-2.0, 0.0]])
    g = build_knn(x, k=1)
    assert edge_set(g) == {(0, 1), (0, 2)}


def test_knn_matches_exhaustive_neighbours():
    x = noise(9, 20, seed=5)
    d = euclidean_distances(x)
    for k in (1, 2, 4):
        assert edge_set(build_knn(x, k=k)) == knn_edges(d.tolist(), k)


def test_knn_full_k_is_complete():
    x = noise(6, 20)
    assert edge_set(build_knn(x, k=5)) == edge_set(build_euclidean(x))


def test_knn_symmetric_and_carries_affinity():
    x = noise(10, 25, seed=2)
    g = build_knn(x, k=3)
    full = build_euclidean(x).weights
    assert g.is_symmetric()
    mask = g.weights > 0
    np.testing.assert_array_equal(g.weights[mask], full[mask])
    assert g.n_edges() >= 3 * 10 / 2


@pytest.mark.parametrize("k", [0, 6, 10])
def test_knn_invalid_k(k):
    with pytest.raises(ValueError):
        build_knn(noise(6, 10), k=k)


# ------------------------------------------------------------------------ DTW
def test_dtw_self_distance():
    x = np.array([0.3, -1.0, 2.0, 0.5])
    assert dtw_distance(x, x) == 0.0


def test_dtw_hand_table():
    assert dtw_distance([0, 0, 1], [0, 1, 1]) == 0.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_dtw_matches_bruteforce(x, y):
    assert dtw_distance(x, y) == pytest.approx(dtw_bruteforce(x, y), abs=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6).flatmap(
    lambda x: st.tuples(st.just(x), st.lists(st.floats(-5, 5), min_size=len(x), max_size=len(x)))))
def test_dtw_not_above_lockstep_cost(pair):
    x, y = pair
    assert dtw_distance(x, y) <= sum(abs(a - b) for a, b in zip(x, y)) + 1e-12


def test_dtw_matrix_symmetric_zero_diagonal():
    d = dtw_distance_matrix(noise(5, 12))
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


def test_dtw_graph_uses_gaussian_rule():
    x = noise(5, 12, seed=8)
    np.testing.assert_allclose(build_dtw(x).weights, gaussian_affinity(dtw_distance_matrix(x)))


def test_dtw_needs_two_points():
    with pytest.raises(ValueError):
        build_dtw(np.zeros((3, 1)))


# ---------------------------------------------------------------- correlation
def test_clone_variables_correlate_fully():
    x = noise(3, 30)
    x[1] = x[0]
    assert build_correlation(x).weights[0, 1] == pytest.approx(1.0)


def test_anticorrelation_is_absolute():
    g = build_correlation(np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]))
    assert g.weights[0, 1] == pytest.approx(1.0)


def test_independent_noise_is_weakly_correlated():
    x = np.random.default_rng(99).normal(size=(2, 10_000))
    assert build_correlation(x).weights[0, 1] < 0.05


def test_correlation_matches_oracle():
    x = noise(4, 15, seed=4)
    w = build_correlation(x).weights
    for i in range(4):
        for j in range(4):
            if i != j:
                assert w[i, j] == pytest.approx(abs(pearson(list(x[i]), list(x[j]))), abs=1e-12)


def test_zero_variance_variable_is_named():
    x = noise(3, 10)
    x[2] = 1.0
    with pytest.raises(ValueError, match="var_3"):
        build_correlation(x)


# --------------------------------------------------------------------- random
def test_random_edge_count():
    assert build_random(26, 0.2, seed=1).n_edges() == 65


def test_random_is_seeded():
    np.testing.assert_array_equal(build_random(12, 0.4, 3).weights, build_random(12, 0.4, 3).weights)
    assert not np.array_equal(build_random(12, 0.4, 3).weights, build_random(12, 0.4, 4).weights)


def test_random_full_density_is_complete():
    g = build_random(7, 1.0, seed=0)
    assert g.n_edges() == 21
    off = g.weights[~np.eye(7, dtype=bool)]
    assert np.all((off > 0) & (off <= 1))


# ------------------------------------------------------------------- sparsify
def test_full_density_is_identity():
    g = build_euclidean(noise())
    np.testing.assert_array_equal(sparsify(g, 1.0).weights, g.weights)


def test_sparsify_keeps_budget_for_26_nodes():
    g = build_euclidean(noise(26, 30))
    assert sparsify(g, 0.2).n_edges() == 65
    assert sparsify(g, 0.4).n_edges() == 130


def test_sparsify_keeps_heaviest_edges():
    g = build_euclidean(noise(10, 20, seed=6))
    s = sparsify(g, 0.3)
    kept = s.weights > 0
    off = ~np.eye(10, dtype=bool)
    assert g.weights[kept].min() >= g.weights[off & ~kept].max()


def test_sparsify_ties_break_lexicographically():
    w = np.ones((4, 4)) - np.eye(4)
    s = sparsify(Graph(w, "EUC"), 0.5)  # 3 of 6 edges
    assert edge_set(s) == {(0, 1), (0, 2), (0, 3)}


@given(arrays(np.float64, (7, 7), elements=st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0])),
       st.sampled_from([0.2, 0.4, 0.6]))
def test_sparsify_matches_sorted_oracle(w, gdt):
    w = np.triu(w, 1)
    w = w + w.T
    budget = int(round(gdt * 21))
    assert edge_set(sparsify(Graph(w, "EUC"), gdt)) == top_edges(w.tolist(), budget)


@pytest.mark.parametrize("metric", STATIC_METRICS + ("RAND",))
@pytest.mark.parametrize("gdt", [0.2, 0.4, 1.0])
def test_static_graph_invariants(metric, gdt):
    g = build_graph(metric, noise(26, 40, seed=12), gdt, seed=3)
    assert g.is_symmetric()
    assert np.all(np.diag(g.weights) == 0)
    assert np.all(g.weights >= 0)
    assert g.n_edges() == int(round(gdt * 325))


def test_unknown_metric():
    with pytest.raises(ValueError):
        build_graph("COSINE", noise(), 0.2)


@pytest.mark.parametrize("gdt", [0.0, -0.2, 1.5])
def test_invalid_gdt(gdt):
    with pytest.raises(ValueError):
        sparsify(build_euclidean(noise()), gdt)


# ------------------------------------------------------------------ normalize
def test_two_node_complete_graph():
    np.testing.assert_allclose(normalize(np.array([[0.0, 1.0], [1.0, 0.0]])).adjacency, [[0.5, 0.5], [0.5, 0.5]])


def test_empty_graph_normalizes_to_identity():
    np.testing.assert_array_equal(normalize(np.zeros((4, 4))).adjacency, np.eye(4))


def test_gcn_matches_loop_oracle():
    w = build_euclidean(noise(6, 10)).weights
    np.testing.assert_allclose(gcn_normalize(w), gcn_loops(w.tolist()), atol=1e-14)


def test_chebyshev_recursion():
    ng = normalize(build_euclidean(noise(6, 10)), chebyshev_order=4)
    L, T = ng.scaled_laplacian, ng.chebyshev
    np.testing.assert_array_equal(T[0], np.eye(6))
    np.testing.assert_array_equal(T[1], L)
    np.testing.assert_allclose(T[2], 2 * L @ L - np.eye(6), atol=1e-14)
    np.testing.assert_allclose(T[3], 2 * L @ T[2] - T[1], atol=1e-14)


def test_scaled_laplacian_spectrum_in_unit_interval():
    ng = normalize(build_correlation(noise(8, 30), 0.4), chebyshev_order=2)
    eig = np.linalg.eigvalsh(ng.scaled_laplacian)
    assert eig.min() >= -1 - 1e-6 and eig.max() <= 1 + 1e-6


def test_power_iteration_matches_eigvalsh():
    a = noise(6, 6)
    a = a @ a.T
    assert power_iteration(a) == pytest.approx(np.linalg.eigvalsh(a).max(), rel=1e-6)


@given(arrays(np.float64, (6, 6), elements=st.floats(0, 3)))
def test_normalized_adjacency_spectral_radius(w):
    w = (w + w.T) / 2
    np.fill_diagonal(w, 0)
    a = normalize(w).adjacency
    assert power_iteration(a) <= 1 + 1e-6
    assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-9


def test_normalize_rejects_negative():
    with pytest.raises(ValueError):
        normalize(np.array([[0.0, -1.0], [-1.0, 0.0]]))


# -------------------------------------------------------- graph correlation
def test_identical_graphs_correlate():
    g = build_euclidean(noise())
    assert graph_correlation(g, g) == pytest.approx(1.0)


def test_graph_correlation_scale_invariant():
    g = build_euclidean(noise())
    assert graph_correlation(g, Graph(3.5 * g.weights, "EUC")) == pytest.approx(1.0)


def test_complement_ordering_is_negative():
    a = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], float)
    b = np.array([[0, 3, 2], [3, 0, 1], [2, 1, 0]], float)
    assert graph_correlation(a, b) == pytest.approx(pearson([1, 2, 1, 3, 2, 3], [3, 2, 3, 1, 2, 1]))
    assert graph_correlation(a, b) < 0


def test_constant_graph_correlation_undefined():
    with pytest.raises(UndefinedCorrelationError):
        graph_correlation(np.ones((3, 3)), build_euclidean(noise(3, 5)))


# ------------------------------------------------------------------------ I/O
def test_graph_round_trip_is_bit_exact(tmp_path):
    g = build_dtw(noise(5, 9), 0.4)
    g.seed = 17
    save_graph(g, tmp_path / "g.csv")
    back = load_graph(tmp_path / "g.csv")
    np.testing.assert_array_equal(back.weights, g.weights)
    assert (back.metric, back.gdt, back.seed, back.node_names) == ("DTW", 0.4, 17, g.node_names)


def test_graph_invariants_enforced():
    with pytest.raises(ValueError):
        Graph(np.array([[0.0, -1.0], [0.0, 0.0]]), "EUC")
    with pytest.raises(ValueError):
        Graph(np.zeros((2, 3)), "EUC")
