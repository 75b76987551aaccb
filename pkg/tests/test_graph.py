"""Population-graph assembly, kernel similarity, and edge dropout."""

import numpy as np
import pytest
from scipy.stats import binom

from popfusion.errors import ValidationError
from popfusion.graph import (apply_edge_dropout, assemble_population_graph,
                             correlation_rho, default_sigma, edge_dropout_mask,
                             export_adjacency_coo, similarity_kernel,
                             similarity_matrix, threshold_adjacency)


# ---- similarity kernel ------------------------------------------------------


def test_identical_vectors_similarity_one():
    x = np.array([1.0, 2.0, 5.0, -1.0])
    assert similarity_kernel(x, x, sigma=0.7) == pytest.approx(1.0)


def test_rho_equal_sigma_gives_exp_minus_half():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=12), rng.normal(size=12)
    rho = correlation_rho(x, y)
    assert similarity_kernel(x, y, sigma=rho) == pytest.approx(np.exp(-0.5), abs=1e-9)
    assert similarity_kernel(x, y, sigma=rho) == pytest.approx(0.606531, abs=1e-6)


def test_similarity_symmetric_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = rng.normal(size=9), rng.normal(size=9)
        assert similarity_kernel(x, y, 0.8) == similarity_kernel(y, x, 0.8)


def test_zero_variance_vector_maximal_distance():
    x = np.full(6, 3.0)
    y = np.arange(6.0)
    assert correlation_rho(x, y) == 1.0
    assert correlation_rho(x, x) == 1.0


def test_similarity_requires_positive_sigma():
    with pytest.raises(ValidationError):
        similarity_kernel(np.ones(3), np.ones(3), 0.0)


def test_similarity_range():
    rng = np.random.default_rng(2)
    sim = similarity_matrix(rng.normal(size=(15, 8)), sigma=0.9)
    assert np.all(sim > 0) and np.all(sim <= 1.0)


def test_default_sigma_mean_train_distance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 6))
    from popfusion.kernels import correlation_distance
    rho = correlation_distance(x[:4])
    expected = rho[~np.eye(4, dtype=bool)].mean()
    assert default_sigma(x, train_idx=np.arange(4)) == pytest.approx(expected)


# ---- assembly ----------------------------------------------------------------


def test_assembly_constant_features_affinity_product():
    x_img = np.ones((5, 3)) * [0.2, -0.4, 0.9]  # identical rows -> Sim = 1
    x_non = np.ones((5, 2)) * [1.0, 2.0]
    affinity = np.full((5, 5), 0.5)
    g = assemble_population_graph(x_img, x_non, affinity, sigma=1.0)
    off = ~np.eye(5, dtype=bool)
    np.testing.assert_allclose(g.adjacency[off], 0.5, atol=1e-12)
    np.testing.assert_allclose(np.diag(g.adjacency), 1.0)
    assert g.x_cat.shape == (5, 5)


def test_assembly_zero_affinity_annihilates():
    rng = np.random.default_rng(4)
    x_img, x_non = rng.normal(size=(4, 6)), rng.normal(size=(4, 3))
    affinity = np.full((4, 4), 0.4)
    affinity[1, 2] = affinity[2, 1] = 0.0
    g = assemble_population_graph(x_img, x_non, affinity, sigma=0.8)
    assert g.adjacency[1, 2] == 0.0 and g.adjacency[2, 1] == 0.0


def test_assembly_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    x_img, x_non = rng.normal(size=(4, 5)), rng.normal(size=(4, 4))
    affinity = rng.uniform(0.1, 0.9, size=(4, 4))
    affinity = (affinity + affinity.T) / 2
    sigma = 0.9
    g = assemble_population_graph(x_img, x_non, affinity, sigma)
    x_cat = np.concatenate([x_img, x_non], axis=1)
    for i in range(4):
        for j in range(4):
            if i == j:
                assert g.adjacency[i, j] == 1.0
            else:
                expected = similarity_kernel(x_cat[i], x_cat[j], sigma) * affinity[i, j]
                assert g.adjacency[i, j] == pytest.approx(expected, abs=1e-12)


def test_assembly_permutation_equivariant():
    rng = np.random.default_rng(6)
    x_img, x_non = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
    affinity = rng.uniform(0.2, 0.8, size=(6, 6))
    affinity = (affinity + affinity.T) / 2
    g = assemble_population_graph(x_img, x_non, affinity, 1.1)
    perm = rng.permutation(6)
    g2 = assemble_population_graph(x_img[perm], x_non[perm],
                                   affinity[np.ix_(perm, perm)], 1.1)
    np.testing.assert_allclose(g2.adjacency, g.adjacency[np.ix_(perm, perm)],
                               atol=1e-12)


def test_assembly_offdiagonal_range():
    rng = np.random.default_rng(7)
    x_img, x_non = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    affinity = rng.uniform(0.05, 0.95, size=(8, 8))
    affinity = (affinity + affinity.T) / 2
    g = assemble_population_graph(x_img, x_non, affinity, 0.7)
    off = g.adjacency[~np.eye(8, dtype=bool)]
    assert np.all(off >= 0) and np.all(off <= 1)


def test_assembly_shape_mismatch():
    with pytest.raises(ValidationError):
        assemble_population_graph(np.zeros((3, 2)), np.zeros((4, 2)),
                                  np.eye(3), 1.0)


# ---- edge dropout ---------------------------------------------------------------


def _demo_adjacency(n=50, seed=8):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 1.0, size=(n, n))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 1.0)
    return a


def test_dropout_p_zero_is_identity():
    a = _demo_adjacency()
    np.testing.assert_array_equal(apply_edge_dropout(a, 0.0, seed=0), a)


def test_dropout_not_training_is_identity():
    a = _demo_adjacency()
    np.testing.assert_array_equal(apply_edge_dropout(a, 0.5, seed=0, training=False), a)


def test_dropout_near_one_survival_bound():
    a = _demo_adjacency(n=50)
    n_pairs = 50 * 49 // 2
    bound = binom.ppf(0.999, n_pairs, 0.001)
    for seed in range(20):
        out = apply_edge_dropout(a, 0.999, seed=seed)
        survivors = np.count_nonzero(out[np.triu_indices(50, k=1)])
        assert survivors <= bound


def test_dropout_survival_fraction_matches_rate():
    a = _demo_adjacency(n=40)
    iu = np.triu_indices(40, k=1)
    kept = 0
    for seed in range(1000):
        out = apply_edge_dropout(a, 0.3, seed=seed)
        kept += np.count_nonzero(out[iu])
    frac = kept / (1000 * len(iu[0]))
    assert abs(frac - 0.7) <= 0.02


def test_dropout_preserves_symmetry_and_diagonal():
    a = _demo_adjacency(n=30)
    for seed in range(100):
        out = apply_edge_dropout(a, 0.4, seed=seed)
        np.testing.assert_array_equal(out, out.T)
        np.testing.assert_array_equal(np.diag(out), np.diag(a))


def test_dropout_mask_is_binary():
    mask = edge_dropout_mask(20, 0.5, np.random.default_rng(0))
    assert set(np.unique(mask)) <= {0.0, 1.0}
    np.testing.assert_array_equal(np.diag(mask), 1.0)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValidationError):
        apply_edge_dropout(_demo_adjacency(), 1.0, seed=0)


# ---- misc ------------------------------------------------------------------------


def test_threshold_sparsifies_offdiagonal_only():
    a = _demo_adjacency(n=10)
    out = threshold_adjacency(a, 0.5)
    off = ~np.eye(10, dtype=bool)
    assert np.all((out[off] == 0) | (out[off] >= 0.5))
    np.testing.assert_array_equal(np.diag(out), np.diag(a))


def test_export_coo_roundtrip(tmp_path):
    a = _demo_adjacency(n=6)
    a[0, 1] = a[1, 0] = 0.0
    path = tmp_path / "adj.tsv"
    export_adjacency_coo(a, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "i\tj\tweight"
    assert len(lines) - 1 == np.count_nonzero(a)
