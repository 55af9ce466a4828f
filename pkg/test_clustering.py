"""
Tests for autoencoder, GNN tower, soft assignments and k-means seeding
"""
import math

import numpy as np
import pytest

from clustering import (
    AutoEncoder, ClusterCenters, GnnTower, ae_forward, assign, clustering_losses,
    gnn_forward, init_centers_kmeans, init_clustering, joint_objective, kmeans_tol, reconstruction_loss,
    soft_assignment_q, target_distribution_p,
)
from errors import ConfigError, DegenerateClusterError, ShapeError
from graphdata import normalize_adjacency
from numcore import ParamSet, finite_difference_check, row_softmax


def _zero(params):
    params.load_state({name: np.zeros(p.shape) for name, p in params.items()})


def _toy(n=6, d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    model = init_clustering(d, k, hidden=5, seed=seed)
    model.params.load_state({"mu": rng.uniform(-1, 1, size=(k, k))})
    E = rng.uniform(-1, 1, size=(n, d))
    w = rng.uniform(0, 1, size=(n, n))
    adj = normalize_adjacency((w + w.T) * (1 - np.eye(n)))
    return model, E, adj


# ---------- Autoencoder ----------

def test_zero_embeddings_zero_params():
    model = init_clustering(4, 3, hidden=5)
    _zero(model.params)
    layers, E_hat = ae_forward(np.zeros((6, 4)), model.ae)
    assert all(np.array_equal(a.data, np.zeros(a.shape)) for a in layers)
    assert np.array_equal(E_hat.data, np.zeros((6, 4)))
    assert [a.shape for a in layers] == [(6, 5), (6, 3)]


def test_single_layer_hand_example():
    params = ParamSet()
    params.add("ae_enc_w1", [[1.0]])
    params.add("ae_enc_b1", [[0.5]])
    params.add("ae_dec_w1", [[1.0]])
    params.add("ae_dec_b1", [[0.0]])
    layers, E_hat = ae_forward(np.zeros((1, 1)), AutoEncoder(params, (1, 1)))
    assert layers[0].item() == pytest.approx(math.tanh(0.5), abs=1e-12)
    # decoder head is linear
    assert E_hat.item() == pytest.approx(math.tanh(0.5), abs=1e-12)


def test_ae_width_mismatch():
    model = init_clustering(4, 3)
    with pytest.raises(ShapeError):
        ae_forward(np.zeros((2, 5)), model.ae)


@pytest.mark.parametrize("E, E_hat, expected", [
    ([[1.0, 2.0]], [[1.0, 2.0]], 0.0),
    ([[1.0, 2.0]], [[0.0, 0.0]], 5.0),
    ([[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]], 1.0),
])
def test_reconstruction_loss_examples(E, E_hat, expected):
    assert reconstruction_loss(np.array(E), np.array(E_hat)).item() == pytest.approx(expected, abs=1e-12)


# ---------- GNN tower ----------

def test_isolated_node_zero_weights_uniform():
    model = init_clustering(2, 3, hidden=0)
    _zero(model.params.subset("gnn_"))
    E = np.array([[0.3, 0.2]])
    layers, _ = ae_forward(E, model.ae)
    _, Z = gnn_forward(E, layers, np.array([[1.0]]), model.tower)
    assert np.allclose(Z.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_gnn_rows_stochastic(rng):
    model, E, adj = _toy(k=4)
    layers, _ = ae_forward(E, model.ae)
    _, Z = gnn_forward(E, layers, adj, model.tower)
    assert np.allclose(Z.data.sum(axis=1), 1.0, atol=1e-9)


def test_two_node_complete_graph_hand_example():
    params = ParamSet()
    params.add("gnn_w1", [[0.5, -0.5]])
    params.add("gnn_cls", np.eye(2))
    tower = GnnTower(params, (1, 2))
    E = np.array([[1.0], [3.0]])
    adj = normalize_adjacency([[0.0, 1.0], [1.0, 0.0]])
    # A^(1) only enters from the second layer on
    _, Z = gnn_forward(E, [np.zeros((2, 2))], adj, tower)

    t = math.tanh(1.0)
    first = 1.0 / (1.0 + math.exp(-2.0 * t))
    assert np.allclose(Z.data, [[first, 1 - first], [first, 1 - first]], atol=1e-12)


# ---------- Q and P ----------

def test_q_equidistant_is_uniform():
    centers = ClusterCenters(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert np.allclose(soft_assignment_q(np.array([[0.5, 0.0]]), centers).data, [[0.5, 0.5]])


def test_q_hand_examples():
    centers = ClusterCenters(np.array([[0.0, 0.0], [1.0, 0.0]]), v=1.0)
    a = np.zeros((1, 2))
    assert np.allclose(soft_assignment_q(a, centers, "as_printed").data, [[0.8, 0.2]], atol=1e-12)
    assert np.allclose(soft_assignment_q(a, centers, "dec_standard").data, [[2 / 3, 1 / 3]], atol=1e-12)


def test_unknown_exponent_mode():
    with pytest.raises(ConfigError):
        init_clustering(4, 3, exponent_mode="student_t")


def test_p_uniform_fixed_point():
    Q = np.full((2, 2), 0.5)
    assert np.array_equal(target_distribution_p(Q), Q)


def test_p_single_row():
    assert np.allclose(target_distribution_p([[0.8, 0.2]]), [[0.8, 0.2]], atol=1e-12)


def test_p_hand_example():
    P = target_distribution_p([[0.9, 0.1], [0.5, 0.5]])
    # f = (1.4, 0.6)
    r1 = np.array([0.81 / 1.4, 0.01 / 0.6])
    r2 = np.array([0.25 / 1.4, 0.25 / 0.6])
    assert np.allclose(P, [r1 / r1.sum(), r2 / r2.sum()], atol=1e-9)
    assert np.allclose(P, [[0.972, 0.028], [0.300, 0.700]], atol=1e-3)


def test_p_sharpens_when_frequencies_equal():
    Q = np.array([[0.7, 0.3], [0.3, 0.7]])
    P = target_distribution_p(Q)

    def entropy(m):
        return -(m * np.log(m)).sum(axis=1)

    assert np.all(entropy(P) <= entropy(Q))


def test_p_degenerate_column():
    with pytest.raises(DegenerateClusterError):
        target_distribution_p([[1.0, 0.0], [1.0, 0.0]])


# ---------- KL losses ----------

def test_kl_zero_when_equal():
    M = np.array([[0.2, 0.8], [0.6, 0.4]])
    l_clu, l_gnn = clustering_losses(M, M, M)
    assert l_clu.item() == pytest.approx(0.0, abs=1e-15)
    assert l_gnn.item() == pytest.approx(0.0, abs=1e-15)


def test_kl_hand_examples():
    l_clu, _ = clustering_losses([[1.0, 0.0]], [[0.5, 0.5]], [[1.0, 0.0]])
    assert l_clu.item() == pytest.approx(math.log(2.0), abs=1e-12)
    _, l_gnn = clustering_losses([[0.8, 0.2]], [[0.8, 0.2]], [[0.5, 0.5]])
    assert l_gnn.item() == pytest.approx(0.8 * math.log(1.6) + 0.2 * math.log(0.4), abs=1e-12)
    assert l_gnn.item() == pytest.approx(0.1927, abs=1e-4)


def test_relabeling_leaves_losses_unchanged(rng):
    Q = row_softmax(rng.normal(size=(5, 3))).data
    Z = row_softmax(rng.normal(size=(5, 3))).data
    P = target_distribution_p(Q)
    perm = [2, 0, 1]
    a = [t.item() for t in clustering_losses(P, Q, Z)]
    b = [t.item() for t in clustering_losses(P[:, perm], Q[:, perm], Z[:, perm])]
    assert a == pytest.approx(b, abs=1e-12)


def test_distributions_on_random_instances():
    for seed in range(100):
        model, E, adj = _toy(n=5, k=3, seed=seed)
        result = assign(model, E, adj)
        for m in (result.Q, result.P, result.Z):
            assert np.allclose(m.sum(axis=1), 1.0, atol=1e-6)
            assert np.all((m >= 0) & (m <= 1))
        l_clu, l_gnn = clustering_losses(result.P, result.Q, result.Z)
        assert l_clu.item() >= 0 and l_gnn.item() >= 0


def test_joint_gradients_match_finite_differences():
    model, E, adj = _toy()
    P = assign(model, E, adj).P
    report = finite_difference_check(
        lambda ps: joint_objective(model, E, adj, P, 0.1, 0.1)[0],
        model.params, step=1e-5, tolerance=1e-3, floor=1e-6)
    assert report.passed, report.summary()


def test_kl_gradients_match_finite_differences_strict():
    model, E, adj = _toy(k=3)
    P = assign(model, E, adj).P
    report = finite_difference_check(
        lambda ps: joint_objective(model, E, adj, P, 1.0, 1.0)[0],
        model.params, step=1e-5, tolerance=1e-4, floor=1e-6)
    assert report.passed, report.summary()


# ---------- k-means ----------

def test_kmeans_single_cluster_is_mean(rng):
    A = rng.normal(size=(10, 3))
    centers = init_centers_kmeans(A, 1, seed=0)
    assert np.allclose(centers.mu.data, A.mean(axis=0, keepdims=True), atol=1e-12)


def test_kmeans_identical_rows():
    A = np.tile([[0.3, -0.2, 1.0]], (6, 1))
    centers = init_centers_kmeans(A, 3, seed=0)
    assert np.allclose(centers.mu.data, np.tile(A[:1], (3, 1)))


def test_kmeans_two_blobs(rng):
    radius = 0.1
    a = rng.normal(0.0, radius / 3, size=(20, 2))
    b = rng.normal(0.0, radius / 3, size=(20, 2)) + [10 * radius, 0.0]
    centers = init_centers_kmeans(np.vstack([a, b]), 2, seed=4).mu.data
    found = centers[np.argsort(centers[:, 0])]
    assert np.allclose(found, [a.mean(axis=0), b.mean(axis=0)], atol=0.1 * radius)


def test_kmeans_needs_enough_rows():
    with pytest.raises(ConfigError):
        init_centers_kmeans(np.zeros((2, 2)), 3)


def test_kmeans_is_deterministic(rng):
    A = rng.normal(size=(30, 3))
    assert np.array_equal(init_centers_kmeans(A, 3, seed=5).mu.data, init_centers_kmeans(A, 3, seed=5).mu.data)


def test_kmeans_tolerance_is_absolute(rng):
    # sklearn scales tol by the mean column variance; the threshold stays 1e-6 in data units
    for spread in (1e-4, 1.0, 1e3):
        A = rng.normal(0.0, spread, size=(40, 3))
        assert kmeans_tol(A) * np.mean(np.var(A, axis=0)) == pytest.approx(1e-6, rel=1e-12)
    assert kmeans_tol(np.ones((5, 2))) == 0.0
