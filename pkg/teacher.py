"""
The global forecaster.

A per-node MLP on [window || embedding]: two tanh hidden layers and a
linear head of width H. The embedding matrix E is learned jointly with the
MLP and later handed, frozen, to the clustering stage and the students.
"""
from dataclasses import dataclass

import numpy as np

from errors import NumericError, ShapeError
from numcore import (
    ParamSet, Tensor, abs_, as_loss, concat_cols, constant, dense, glorot_uniform,
    mean_all, repeat_rows, sub, tanh,
)


@dataclass(frozen=True)
class EmbeddingMatrix:
    E: np.ndarray

    def __post_init__(self):
        E = np.array(self.E, dtype=np.float64)
        if E.ndim != 2:
            raise ShapeError("EmbeddingMatrix", f"expected N x d, got {E.shape}")
        if not np.all(np.isfinite(E)):
            raise NumericError("embeddings must be finite")
        E.setflags(write=False)
        object.__setattr__(self, "E", E)

    @property
    def n_nodes(self):
        return self.E.shape[0]

    @property
    def d(self):
        return self.E.shape[1]


@dataclass
class TeacherModel:
    params: ParamSet
    t_in: int
    horizon: int
    embed_dim: int
    hidden: int

    @property
    def n_nodes(self):
        return self.params["embeddings"].rows

    @property
    def embeddings(self):
        return EmbeddingMatrix(self.params["embeddings"].data)

    def parameter_count(self):
        return self.params.count()


def init_teacher(n_nodes, t_in, horizon, embed_dim=16, hidden=64, seed=0):
    """Embeddings ~ U(-0.1, 0.1); dense weights Glorot-uniform, zero biases"""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    params.add("embeddings", rng.uniform(-0.1, 0.1, size=(n_nodes, embed_dim)))
    params.add("w1", glorot_uniform(rng, t_in + embed_dim, hidden))
    params.add("b1", np.zeros((1, hidden)))
    params.add("w2", glorot_uniform(rng, hidden, hidden))
    params.add("b2", np.zeros((1, hidden)))
    params.add("w3", glorot_uniform(rng, hidden, horizon))
    params.add("b3", np.zeros((1, horizon)))
    return TeacherModel(params, t_in, horizon, embed_dim, hidden)


def as_window_stack(windows, t_in, n_nodes, op):
    """Return windows as B x N x T_in, accepting a single N x T_in window"""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3:
        raise ShapeError(op, f"expected N x T_in or B x N x T_in windows, got {windows.shape}")
    if windows.shape[2] != t_in:
        raise ShapeError(op, f"window width {windows.shape[2]} != t_in {t_in}")
    if windows.shape[1] != n_nodes:
        raise ShapeError(op, f"window has {windows.shape[1]} nodes, model has {n_nodes}")
    return windows


def teacher_graph(params, windows, embeddings=None):
    """
    Differentiable forward over a B x N x T_in stack; returns a (B*N) x H tensor
    whose rows are window-major (all nodes of window 0, then window 1, ...).
    """
    b, n, t = windows.shape
    x = constant(windows.reshape(b * n, t))
    e = params["embeddings"] if embeddings is None else constant(embeddings)
    h = tanh(dense(concat_cols(x, repeat_rows(e, b)), params["w1"], params["b1"]))
    h = tanh(dense(h, params["w2"], params["b2"]))
    return dense(h, params["w3"], params["b3"])


def teacher_forward(window, model):
    """N x T_in -> N x H (or B x N x T_in -> B x N x H)"""
    single = np.ndim(window) == 2
    stack = as_window_stack(window, model.t_in, model.n_nodes, "teacher_forward")
    out = teacher_graph(model.params, stack).data.reshape(stack.shape[0], stack.shape[1], model.horizon)
    return out[0] if single else out


def rows_of(y):
    """Flatten B x N x H targets to (B*N) x H, matching teacher_graph row order"""
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return y.reshape(-1, y.shape[-1]) if y.ndim == 3 else y


def teacher_loss(y_true, y_hat):
    """Mean absolute error over all nodes and horizon steps"""
    target = rows_of(y_true)
    pred = y_hat if isinstance(y_hat, Tensor) else constant(rows_of(y_hat))
    if target.shape != pred.shape:
        raise ShapeError("teacher_loss", f"targets {target.shape} vs predictions {pred.shape}")
    return as_loss(mean_all(abs_(sub(pred, target))), "teacher")
