"""
Local forecasters, one per sub-graph, and the final fusion rule.

A student is a one-hidden-layer MLP over [window || frozen embedding]. It is
trained against ground truth and the frozen teacher's output, each node's
error weighted by that node's membership in the student's sub-graph.
"""
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, ContractError, ShapeError
from numcore import (
    ParamSet, Tensor, abs_, add, as_loss, concat_cols, constant, dense, glorot_uniform,
    mean_all, mul, repeat_rows, scale, sub, tanh,
)
from teacher import EmbeddingMatrix, as_window_stack, rows_of

ROW_SUM_TOLERANCE = 1e-6


@dataclass
class StudentModel:
    index: int
    params: ParamSet
    t_in: int
    horizon: int
    embed_dim: int
    hidden: int

    def parameter_count(self):
        return self.params.count()


@dataclass(frozen=True)
class ImitationConfig:
    rho: float

    def __post_init__(self):
        check_rho(self.rho)


def check_rho(rho):
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"imitation factor rho must lie in [0, 1], got {rho}")
    return float(rho)


def init_student(index, t_in, horizon, embed_dim=16, hidden=16, seed=0):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    params.add("w1", glorot_uniform(rng, t_in + embed_dim, hidden))
    params.add("b1", np.zeros((1, hidden)))
    params.add("w2", glorot_uniform(rng, hidden, horizon))
    params.add("b2", np.zeros((1, horizon)))
    return StudentModel(index, params, t_in, horizon, embed_dim, hidden)


def _embedding_array(embeddings, n_nodes, embed_dim):
    if embeddings is None:
        E = np.zeros((n_nodes, 0))
    elif isinstance(embeddings, EmbeddingMatrix):
        E = embeddings.E
    else:
        E = np.asarray(embeddings, dtype=np.float64)
    if E.shape != (n_nodes, embed_dim):
        raise ShapeError("student_forward", f"embeddings {E.shape}, expected {(n_nodes, embed_dim)}")
    return E


def student_graph(params, windows, E):
    """B x N x T_in stack -> (B*N) x H tensor in window-major row order"""
    b, n, t = windows.shape
    x = constant(windows.reshape(b * n, t))
    if E.shape[1]:
        x = concat_cols(x, repeat_rows(constant(E), b))
    h = tanh(dense(x, params["w1"], params["b1"]))
    return dense(h, params["w2"], params["b2"])


def student_forward(window, embeddings, model):
    """N x T_in -> N x H (or a B x N x T_in stack -> B x N x H)"""
    single = np.ndim(window) == 2
    n_nodes = np.shape(window)[-2]
    E = _embedding_array(embeddings, n_nodes, model.embed_dim)
    stack = as_window_stack(window, model.t_in, n_nodes, "student_forward")
    out = student_graph(model.params, stack, E).data.reshape(stack.shape[0], n_nodes, model.horizon)
    return out[0] if single else out


def _membership_weights(z_col, n_rows, horizon):
    """Expand an N-vector of memberships to the (B*N) x H layout of the graphs"""
    z = np.asarray(z_col, dtype=np.float64).reshape(-1)
    if n_rows % z.size:
        raise ShapeError("student_loss", f"{z.size} memberships for {n_rows} prediction rows")
    if np.any(z < 0.0) or np.any(z > 1.0):
        raise ContractError("membership weights must lie in [0, 1]")
    return np.repeat(np.tile(z, n_rows // z.size)[:, None], horizon, axis=1)


def student_loss(y_true, y_teacher, y_student, z_col, rho):
    """
    (1 - rho) * mean(z |y - s|) + rho * mean(z |y_teacher - s|)

    Means run over all nodes and horizon steps (and windows, for stacks).
    y_student may be a Tensor from student_graph; the other two are fixed.
    """
    rho = check_rho(rho)
    target = rows_of(y_true)
    imitated = rows_of(y_teacher)
    pred = y_student if isinstance(y_student, Tensor) else constant(rows_of(y_student))
    if target.shape != pred.shape or imitated.shape != pred.shape:
        raise ShapeError("student_loss",
                         f"truth {target.shape}, teacher {imitated.shape}, student {pred.shape}")
    weights = constant(_membership_weights(z_col, pred.rows, pred.cols))

    truth_term = mean_all(mul(weights, abs_(sub(target, pred))))
    imitation_term = mean_all(mul(weights, abs_(sub(imitated, pred))))
    return as_loss(add(scale(truth_term, 1.0 - rho), scale(imitation_term, rho)), "student")


def check_row_stochastic(Z, what="Z"):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError("fuse_predictions", f"{what} must be N x K, got {Z.shape}")
    if np.any(Z < -ROW_SUM_TOLERANCE) or not np.allclose(Z.sum(axis=1), 1.0, rtol=0.0, atol=ROW_SUM_TOLERANCE):
        raise ContractError(f"{what} rows must be probability vectors summing to 1")
    return Z


def student_mixture(student_outputs, Z):
    """sum_k z_ik * s_k for N x H outputs or B x N x H stacks"""
    Z = check_row_stochastic(Z)
    outputs = [np.asarray(s, dtype=np.float64) for s in student_outputs]
    if len(outputs) != Z.shape[1]:
        raise ShapeError("fuse_predictions", f"{len(outputs)} students for {Z.shape[1]} sub-graphs")
    shape = outputs[0].shape
    if any(s.shape != shape for s in outputs):
        raise ShapeError("fuse_predictions", "student outputs disagree in shape")
    if shape[-2] != Z.shape[0]:
        raise ShapeError("fuse_predictions", f"outputs have {shape[-2]} nodes, Z has {Z.shape[0]}")
    mixed = np.zeros(shape)
    for k, s in enumerate(outputs):
        mixed += Z[:, k][:, None] * s
    return mixed


def fuse_predictions(y_teacher, student_outputs, Z):
    """1/2 (teacher + membership-weighted student mixture)"""
    y_teacher = np.asarray(y_teacher, dtype=np.float64)
    mixed = student_mixture(student_outputs, Z)
    if mixed.shape != y_teacher.shape:
        raise ShapeError("fuse_predictions", f"teacher {y_teacher.shape} vs students {mixed.shape}")
    return 0.5 * (y_teacher + mixed)
