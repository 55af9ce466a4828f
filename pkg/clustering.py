"""
Soft node clustering over the teacher's embeddings.

An autoencoder compresses E down to K columns; a GNN tower of the same
depth mixes the encoder activations with graph propagation and ends in a
softmax classification layer (Z). A Student's t kernel against K centers
gives Q, the sharpened target P supervises both Q and Z.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from errors import ConfigError, DegenerateClusterError, ShapeError
from numcore import (
    ParamSet, Tensor, add, as_loss, constant, dense, glorot_uniform, kl_divergence,
    matmul, pairwise_sqdist, power, row_softmax, row_sum, scale, div, square, sub,
    sum_all, tanh,
)
from teacher import EmbeddingMatrix

logger = logging.getLogger(__name__)

EXPONENT_MODES = ("as_printed", "dec_standard")
PSI = 0.5
KMEANS_SHIFT_TOL = 1e-6


@dataclass
class AutoEncoder:
    params: ParamSet
    widths: tuple       # encoder widths d -> ... -> K

    @property
    def n_layers(self):
        return len(self.widths) - 1


@dataclass
class GnnTower:
    params: ParamSet
    widths: tuple
    psi: float = PSI


@dataclass
class ClusterCenters:
    mu: Tensor          # K x K, one center per row
    v: float = 1.0

    def __post_init__(self):
        if not isinstance(self.mu, Tensor):
            self.mu = Tensor(np.array(self.mu, dtype=np.float64), name="mu")
        if self.v <= 0:
            raise ConfigError(f"degrees of freedom v must be > 0, got {self.v}")

    @property
    def k(self):
        return self.mu.rows


@dataclass(frozen=True)
class AssignmentMatrix:
    Z: np.ndarray
    Q: np.ndarray
    P: np.ndarray

    def labels(self):
        return np.argmax(self.Z, axis=1)


@dataclass
class ClusteringModel:
    params: ParamSet
    widths: tuple
    v: float = 1.0
    exponent_mode: str = "as_printed"

    @property
    def k(self):
        return self.widths[-1]

    @property
    def ae(self):
        return AutoEncoder(self.params.subset("ae_"), self.widths)

    @property
    def tower(self):
        return GnnTower(self.params.subset("gnn_"), self.widths)

    @property
    def centers(self):
        return ClusterCenters(self.params["mu"], self.v)

    def parameter_count(self):
        return self.params.count()


def clustering_widths(embed_dim, k, hidden=32):
    if k < 1:
        raise ConfigError(f"number of sub-graphs K must be >= 1, got {k}")
    return (embed_dim, hidden, k) if hidden else (embed_dim, k)


def init_clustering(embed_dim, k, hidden=32, v=1.0, exponent_mode="as_printed", seed=0):
    """
    AE d -> hidden -> K with a mirrored decoder, GNN weights of the same
    shapes (separate parameters), a K x K classification layer and K centers.
    """
    if exponent_mode not in EXPONENT_MODES:
        raise ConfigError(f"t_kernel_exponent must be one of {EXPONENT_MODES}, got {exponent_mode!r}")
    if v <= 0:
        raise ConfigError(f"degrees of freedom v must be > 0, got {v}")
    widths = clustering_widths(embed_dim, k, hidden)
    rng = np.random.default_rng(seed)
    params = ParamSet()

    n_layers = len(widths) - 1
    for l in range(1, n_layers + 1):
        params.add(f"ae_enc_w{l}", glorot_uniform(rng, widths[l - 1], widths[l]))
        params.add(f"ae_enc_b{l}", np.zeros((1, widths[l])))
    mirrored = widths[::-1]
    for l in range(1, n_layers + 1):
        params.add(f"ae_dec_w{l}", glorot_uniform(rng, mirrored[l - 1], mirrored[l]))
        params.add(f"ae_dec_b{l}", np.zeros((1, mirrored[l])))
    for l in range(1, n_layers + 1):
        params.add(f"gnn_w{l}", glorot_uniform(rng, widths[l - 1], widths[l]))
    params.add("gnn_cls", glorot_uniform(rng, k, k))
    params.add("mu", np.zeros((k, k)))

    return ClusteringModel(params, widths, float(v), exponent_mode)


def _embedding_tensor(E):
    if isinstance(E, Tensor):
        return E
    if isinstance(E, EmbeddingMatrix):
        return constant(E.E)
    return constant(np.asarray(E, dtype=np.float64))


# ---------- Autoencoder ----------

def ae_forward(E, ae):
    """
    Returns ([A^(1) .. A^(L)], E_hat). tanh on every layer except the
    decoder's last, which is linear.
    """
    x = _embedding_tensor(E)
    if x.cols != ae.widths[0]:
        raise ShapeError("ae_forward", f"embedding width {x.cols} != AE input width {ae.widths[0]}")

    layers = []
    for l in range(1, ae.n_layers + 1):
        x = tanh(dense(x, ae.params[f"ae_enc_w{l}"], ae.params[f"ae_enc_b{l}"]))
        layers.append(x)

    for l in range(1, ae.n_layers + 1):
        x = dense(x, ae.params[f"ae_dec_w{l}"], ae.params[f"ae_dec_b{l}"])
        if l < ae.n_layers:
            x = tanh(x)
    return layers, x


def reconstruction_loss(E, E_hat):
    """Mean over nodes of the squared Euclidean row distance"""
    target = _embedding_tensor(E)
    E_hat = E_hat if isinstance(E_hat, Tensor) else constant(E_hat)
    if target.shape != E_hat.shape:
        raise ShapeError("reconstruction_loss", f"{target.shape} vs {E_hat.shape}")
    return as_loss(scale(sum_all(square(sub(E_hat, target))), 1.0 / target.rows), "ae")


# ---------- GNN tower ----------

def gnn_forward(E, A_layers, normalized_adj, tower):
    """
    Z^(l) = tanh(A_hat Z~^(l-1) G^(l)) with Z~^(l-1) = (1-psi) Z^(l-1) + psi A^(l-1),
    Z^(0) = A^(0) = E; then Z = softmax(A_hat Z^(L) U^(L)).
    """
    e = _embedding_tensor(E)
    adj = normalized_adj if isinstance(normalized_adj, Tensor) else constant(normalized_adj)
    if adj.shape != (e.rows, e.rows):
        raise ShapeError("gnn_forward", f"adjacency {adj.shape} for {e.rows} nodes")
    n_layers = len(tower.widths) - 1
    if len(A_layers) != n_layers:
        raise ShapeError("gnn_forward", f"{len(A_layers)} encoder layers for a {n_layers}-layer tower")

    z_layers = []
    z_prev = e
    for l in range(1, n_layers + 1):
        a_prev = e if l == 1 else A_layers[l - 2]
        mixed = add(scale(z_prev, 1.0 - tower.psi), scale(a_prev, tower.psi))
        z_prev = tanh(matmul(matmul(adj, mixed), tower.params[f"gnn_w{l}"]))
        z_layers.append(z_prev)

    Z = row_softmax(matmul(matmul(adj, z_prev), tower.params["gnn_cls"]))
    return z_layers, Z


# ---------- Assignments ----------

def kernel_exponent(v, mode="as_printed"):
    if mode == "as_printed":
        return -(v + 1.0) / v
    if mode == "dec_standard":
        return -(v + 1.0) / 2.0
    raise ConfigError(f"t_kernel_exponent must be one of {EXPONENT_MODES}, got {mode!r}")


def soft_assignment_q(A_L, centers, mode="as_printed"):
    """Student's t similarity of each encoder row to each center, rows normalized"""
    if centers.k < 1:
        raise ConfigError("soft assignment needs at least one center")
    a = A_L if isinstance(A_L, Tensor) else constant(A_L)
    weights = power(add(scale(pairwise_sqdist(a, centers.mu), 1.0 / centers.v), 1.0),
                    kernel_exponent(centers.v, mode))
    return div(weights, row_sum(weights))


def target_distribution_p(Q):
    """p_ij proportional to q_ij^2 / f_j with f_j the soft cluster frequency"""
    Q = Q.data if isinstance(Q, Tensor) else np.asarray(Q, dtype=np.float64)
    f = Q.sum(axis=0)
    if not np.all(f > 0):
        empty = [int(j) for j in np.flatnonzero(~(f > 0))]
        raise DegenerateClusterError(f"sub-graph(s) {empty} have zero soft frequency; K may be too large")
    weights = Q * Q / f
    return weights / weights.sum(axis=1, keepdims=True)


def clustering_losses(P, Q, Z):
    """(KL(P||Q), KL(P||Z)); P is a constant target"""
    P = P.data if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64)
    for name, m in (("Q", Q), ("Z", Z)):
        shape = m.shape if isinstance(m, Tensor) else np.shape(m)
        if tuple(shape) != P.shape:
            raise ShapeError("clustering_losses", f"P {P.shape} vs {name} {tuple(shape)}")
    return as_loss(kl_divergence(P, Q), "clu"), as_loss(kl_divergence(P, Z), "gnn")


def init_centers_kmeans(A_L, k, seed=0, v=1.0):
    """
    Lloyd iterations from k-means++ seeding (300 iterations max), best of
    10 seedings by inertia. Empty
    clusters are relocated to the points farthest from their centers.

    Stops once the summed squared center shift is at most KMEANS_SHIFT_TOL
    in the units of A_L. sklearn multiplies its tol by the mean per-column
    variance of the data, so the value passed in is divided by it first.
    """
    A_L = A_L.data if isinstance(A_L, Tensor) else np.asarray(A_L, dtype=np.float64)
    if k < 1 or A_L.shape[0] < k:
        raise ConfigError(f"k-means needs 1 <= k <= N, got k={k} for N={A_L.shape[0]}")

    with warnings.catch_warnings():
        # fewer distinct points than k raises ConvergenceWarning
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, init="k-means++", n_init=10, max_iter=300,
                    tol=kmeans_tol(A_L), random_state=seed, algorithm="lloyd")
        km.fit(A_L)
    logger.debug("k-means converged after %d iterations (inertia %.6g)", km.n_iter_, km.inertia_)
    return ClusterCenters(Tensor(km.cluster_centers_.astype(np.float64), name="mu"), v)


def kmeans_tol(A_L, shift_tol=KMEANS_SHIFT_TOL):
    """sklearn tol that gives an absolute stopping threshold of shift_tol on A_L"""
    spread = float(np.mean(np.var(A_L, axis=0)))
    return shift_tol / spread if spread > 0 else 0.0


# ---------- Whole-module helpers ----------

def clustering_graph(model, E, normalized_adj):
    """Differentiable pass: (A_layers, E_hat, Q, Z)"""
    A_layers, E_hat = ae_forward(E, model.ae)
    Q = soft_assignment_q(A_layers[-1], model.centers, model.exponent_mode)
    _, Z = gnn_forward(E, A_layers, normalized_adj, model.tower)
    return A_layers, E_hat, Q, Z


def joint_objective(model, E, normalized_adj, P, alpha, beta):
    """L_ae + alpha * L_clu + beta * L_gnn, plus the three parts"""
    _, E_hat, Q, Z = clustering_graph(model, E, normalized_adj)
    l_ae = reconstruction_loss(E, E_hat)
    l_clu, l_gnn = clustering_losses(P, Q, Z)
    total = add(add(l_ae, scale(l_clu, alpha)), scale(l_gnn, beta))
    return as_loss(total, "cluster_joint"), {"ae": l_ae, "clu": l_clu, "gnn": l_gnn}


def assign(model, E, normalized_adj):
    """Q, P and Z from frozen parameters"""
    _, _, Q, Z = clustering_graph(model, E, normalized_adj)
    return AssignmentMatrix(Z.data.copy(), Q.data.copy(), target_distribution_p(Q.data))
