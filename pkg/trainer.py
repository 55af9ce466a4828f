"""
Staged training pipeline.

    teacher -> ae_pretrain -> cluster_joint -> students -> done

The teacher is trained first and frozen; its embeddings feed the clustering
stage (autoencoder pre-training, k-means centers, joint KL training with a
periodically refreshed target P); the K students are then distilled from
the frozen teacher with frozen memberships Z. Every stage is seeded from
TrainConfig.seed, so a run is reproducible bit for bit.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from clustering import (
    ClusteringModel, ae_forward, assign, clustering_graph, clustering_losses,
    init_centers_kmeans, init_clustering, joint_objective, reconstruction_loss,
    target_distribution_p,
)
from config import SNAPSHOT_FILE, TrainConfig, load_settings
from errors import ContractError, DivergenceError, GraphForecastError, ParseError, StageError
from graphdata import Scaler, make_windows, split_dataset, zscore
from numcore import Tensor, add, as_loss, backward, constant, scale
from students import StudentModel, init_student, student_graph, student_loss, student_mixture
from teacher import TeacherModel, init_teacher, teacher_graph, teacher_loss
from utils import (
    load_params, read_json, save_params, write_json, write_matrix_csv,
)

logger = logging.getLogger(__name__)

STAGES = ("teacher", "ae_pretrain", "cluster_joint", "students", "done")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_CHUNK = 256
BUNDLE_FILE = "bundle.json"
CURVES_FILE = "curves.csv"


def derive_seed(seed, *tags):
    """Independent child seed for a named part of the run"""
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(tags)).generate_state(1)[0])


# ---------- Loss accounting ----------

def _loss_value(x):
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l_teacher, l_ae, l_clu, l_gnn, student_losses, alpha, beta):
    """L_teacher + L_ae + alpha * L_clu + beta * L_gnn + sum of student losses"""
    parts = {"teacher": l_teacher, "ae": l_ae, "clu": l_clu, "gnn": l_gnn}
    parts.update({f"student_{k}": s for k, s in enumerate(student_losses)})
    for name, value in parts.items():
        if _loss_value(value) < 0:
            raise ContractError(f"loss component '{name}' is negative ({_loss_value(value)})")

    total = add(add(constant(_loss_value(l_teacher)), constant(_loss_value(l_ae))),
                add(scale(constant(_loss_value(l_clu)), alpha), scale(constant(_loss_value(l_gnn)), beta)))
    for s in student_losses:
        total = add(total, constant(_loss_value(s)))
    return as_loss(total, "total")


# ---------- Optimizer ----------

class Adam:
    def __init__(self, params, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def optimize(params, loss_builder, steps, lr, patience, val_builder=None, eval_every=1,
             history=None, label="optimize", adam=None, restore_best=True):
    """
    Adam updates with early stopping; returns params holding the best state.

    Args:
        params: ParamSet updated in place.
        loss_builder: params -> scalar loss Tensor for one update.
        steps: number of updates.
        lr: learning rate, >= 0 (0 leaves params unchanged).
        patience: stop once this many evaluations in a row fail to improve.
        val_builder: params -> float or scalar Tensor; without it the training
            loss of the evaluation step is used.
        eval_every: updates per evaluation interval.
        history: optional list receiving one dict per evaluation.
        adam: Adam instance to continue from; its moments carry over between
            calls. A fresh one is created when omitted.
        restore_best: load the best state at the end. With False the final
            state is kept and patience=None disables early stopping.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if eval_every < 1:
        raise ContractError(f"eval_every must be >= 1, got {eval_every}")

    adam = adam or Adam(params, lr)
    best_value = math.inf
    best_state = params.state()
    bad_evals = 0
    interval_losses = []

    for step in range(1, steps + 1):
        loss = loss_builder(params)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        interval_losses.append(value)

        evaluating = step % eval_every == 0 or step == steps
        before = params.state() if evaluating and val_builder is None else None

        backward(loss, params)
        adam.step()

        if not evaluating:
            continue
        if val_builder is None:
            score, snapshot = value, before
        else:
            score = _loss_value(val_builder(params))
            if not math.isfinite(score):
                raise DivergenceError(step, score)
            snapshot = None

        epoch = (step + eval_every - 1) // eval_every
        train_mean = float(np.mean(interval_losses))
        interval_losses = []
        if history is not None:
            history.append({"epoch": epoch, "train": train_mean, "eval": score})
        logger.debug("%s: epoch %d train=%.6g eval=%.6g", label, epoch, train_mean, score)

        if score < best_value:
            best_value = score
            best_state = snapshot if snapshot is not None else params.state()
            bad_evals = 0
        else:
            bad_evals += 1
        if patience is not None and bad_evals >= patience:
            logger.debug("%s: stopping after epoch %d (best %.6g)", label, epoch, best_value)
            break

    if restore_best:
        params.load_state(best_state)
    return params


# ---------- Data preparation ----------

@dataclass
class PreparedData:
    scaler: Scaler
    train: object      # WindowBatch
    val: object
    test: object
    interval_minutes: float = 5.0

    @property
    def n_nodes(self):
        return self.train.inputs.shape[1]


def prepare_data(series, config):
    """z-score with train statistics, then window each chronological segment separately"""
    train, val, test = split_dataset(series, config.split_spec)
    normalized, scaler = zscore(series, train)
    b1, b2 = train.n_steps, train.n_steps + val.n_steps
    windows = [make_windows(normalized.segment(a, b), config.t_in, config.horizon)
               for a, b in ((0, b1), (b1, b2), (b2, series.n_steps))]
    logger.info("Windows: %d train, %d val, %d test (t_in=%d, horizon=%d)",
                len(windows[0]), len(windows[1]), len(windows[2]), config.t_in, config.horizon)
    return PreparedData(scaler, *windows, interval_minutes=series.interval_minutes)


class BatchedObjective:
    """Shuffled mini-batches over a WindowBatch; each call builds the loss for the next batch"""

    def __init__(self, windows, batch_size, seed, loss_fn):
        self.windows = windows
        self.batch_size = max(1, min(batch_size, len(windows)))
        self.n_batches = math.ceil(len(windows) / self.batch_size)
        self.loss_fn = loss_fn
        self._rng = np.random.default_rng(seed)
        self._order = None
        self._cursor = 0

    def __call__(self, params):
        if self._cursor == 0:
            self._order = self._rng.permutation(len(self.windows))
        idx = self._order[self._cursor * self.batch_size:(self._cursor + 1) * self.batch_size]
        self._cursor = (self._cursor + 1) % self.n_batches
        return self.loss_fn(params, self.windows.inputs[idx], self.windows.targets[idx])


def chunked_mean(fn, windows, chunk=EVAL_CHUNK):
    """Mean of a per-window-mean loss over all windows, evaluated in chunks"""
    total, count = 0.0, 0
    for start in range(0, len(windows), chunk):
        stop = min(start + chunk, len(windows))
        total += _loss_value(fn(windows.inputs[start:stop], windows.targets[start:stop])) * (stop - start)
        count += stop - start
    return total / count


def chunked_predict(fn, inputs, chunk=EVAL_CHUNK):
    return np.concatenate([fn(inputs[s:s + chunk]) for s in range(0, len(inputs), chunk)], axis=0)


# ---------- Pipeline state ----------

@dataclass
class PipelineState:
    stage: str = STAGES[0]
    curves: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    def advance(self, stage):
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise ContractError(f"cannot go back from stage '{self.stage}' to '{stage}'")
        self.stage = stage

    def require(self, *names):
        missing = [n for n in names if n not in self.artifacts]
        if missing:
            raise ContractError(f"stage '{self.stage}' needs {missing} from an earlier stage")
        return [self.artifacts[n] for n in names]

    def record(self, stage, history, train_term, eval_term=None):
        for entry in history:
            self.curves.append((stage, entry["epoch"], train_term, entry["train"]))
            if eval_term is not None:
                self.curves.append((stage, entry["epoch"], eval_term, entry["eval"]))

    @contextmanager
    def running(self, stage):
        self.advance(stage)
        logger.info("Stage %s", stage)
        try:
            yield self
        except StageError:
            raise
        except GraphForecastError as e:
            raise StageError(stage, e) from e


# ---------- Stages ----------

def train_teacher(data, config, seed, history=None):
    teacher = init_teacher(data.n_nodes, config.t_in, config.horizon, config.embed_dim,
                           config.teacher_hidden, seed)

    def batch_loss(params, inputs, targets):
        return teacher_loss(targets, teacher_graph(params, inputs))

    objective = BatchedObjective(data.train, config.batch_size, derive_seed(seed, 1), batch_loss)
    val = lambda params: chunked_mean(lambda x, y: teacher_loss(y, teacher_graph(params, x)), data.val)
    optimize(teacher.params, objective, config.epochs_teacher * objective.n_batches, config.lr,
             config.patience, val_builder=val, eval_every=objective.n_batches,
             history=history, label=f"teacher[{seed}]")
    return teacher


def pretrain_autoencoder(model, E, config, history=None):
    ae_params = model.params.subset("ae_")

    def loss(params):
        _, E_hat = ae_forward(E, model.ae)
        return reconstruction_loss(E, E_hat)

    optimize(ae_params, loss, config.epochs_ae * config.updates_per_epoch, config.lr, config.patience,
             eval_every=config.updates_per_epoch, history=history, label="ae_pretrain")
    return model


def train_clustering(model, E, normalized_adj, config, history=None):
    """
    k-means centers on the pre-trained encoder output, then joint training.

    P is recomputed from Q every p_refresh epochs. One Adam instance runs
    through all refreshes and the final state is kept.
    """
    A_layers, _ = ae_forward(E, model.ae)
    centers = init_centers_kmeans(A_layers[-1].data, model.k, seed=config.seed, v=model.v)
    model.params["mu"].data = centers.mu.data.copy()

    adam = Adam(model.params, config.lr)
    steps = config.updates_per_epoch
    done = 0
    while done < config.epochs_cluster:
        rounds = min(config.p_refresh, config.epochs_cluster - done)
        _, _, Q, _ = clustering_graph(model, E, normalized_adj)
        P = target_distribution_p(Q.data)
        loss = lambda params: joint_objective(model, E, normalized_adj, P, config.alpha, config.beta)[0]
        round_history = []
        optimize(model.params, loss, rounds * steps, config.lr, None, eval_every=steps,
                 history=round_history, label="cluster_joint", adam=adam, restore_best=False)
        for entry in round_history:
            entry["epoch"] += done
        if history is not None:
            history.extend(round_history)
        done += rounds
    return model


def _student_val_loss(student, teacher, E, data, z_col):
    def fn(x, y):
        s = student_graph(student.params, x, E)
        return student_loss(y, teacher_graph(teacher.params, x).data, s, z_col, 0.0)
    return chunked_mean(fn, data.val)


def train_student(k, teacher, E, Z, data, config, rho_grid):
    """
    Grid search over rho: train one candidate per value from the same
    initialization, keep the lowest membership-weighted validation MAE.
    """
    z_col = Z[:, k]
    seed = derive_seed(config.seed, 2, k)
    candidates = []

    for rho in rho_grid:
        student = init_student(k, config.t_in, config.horizon, config.embed_dim, config.student_hidden, seed)

        def batch_loss(params, inputs, targets, rho=rho):
            y_teacher = teacher_graph(teacher.params, inputs).data
            return student_loss(targets, y_teacher, student_graph(params, inputs, E), z_col, rho)

        objective = BatchedObjective(data.train, config.batch_size, derive_seed(seed, 1), batch_loss)
        history = []
        val = lambda params, student=student: _student_val_loss(student, teacher, E, data, z_col)
        optimize(student.params, objective, config.epochs_student * objective.n_batches, config.lr,
                 config.patience, val_builder=val, eval_every=objective.n_batches,
                 history=history, label=f"student_{k}[rho={rho}]")
        candidates.append((_student_val_loss(student, teacher, E, data, z_col), rho, student, history))

    best = min(range(len(candidates)), key=lambda i: (candidates[i][0], i))
    val_loss, rho, student, history = candidates[best]
    logger.info("student_%d: rho=%s val=%.6g", k, rho, val_loss)
    grid = [(rho_c, loss_c) for loss_c, rho_c, _, _ in candidates]
    return student, rho, val_loss, grid, history


# ---------- Bundle ----------

@dataclass
class TrainedBundle:
    config: TrainConfig
    scaler: Scaler
    node_ids: tuple
    teacher: TeacherModel
    clustering: ClusteringModel
    Z: np.ndarray
    students: list
    rhos: list = field(default_factory=list)
    rho_grid: list = field(default_factory=list)       # (student, rho, val_loss)
    curves: list = field(default_factory=list)         # (stage, epoch, term, value)
    interval_minutes: float = 5.0

    @property
    def k(self):
        return self.Z.shape[1]

    @property
    def embeddings(self):
        return self.teacher.embeddings.E

    def predict(self, inputs):
        """Normalized-unit forecasts for a B x N x T_in stack: teacher, students, fused"""
        E = self.embeddings
        teacher_out = chunked_predict(
            lambda x: teacher_graph(self.teacher.params, x).data.reshape(len(x), -1, self.config.horizon), inputs)
        student_outs = [
            chunked_predict(lambda x, s=s: student_graph(s.params, x, E).data.reshape(len(x), -1, self.config.horizon),
                            inputs)
            for s in self.students
        ]
        mixture = student_mixture(student_outs, self.Z)
        return {"teacher": teacher_out, "students": mixture, "fused": 0.5 * (teacher_out + mixture)}

    def parameter_counts(self):
        return {
            "teacher": self.teacher.parameter_count(),
            "clustering": self.clustering.parameter_count(),
            "students": [s.parameter_count() for s in self.students],
        }

    # ----- persistence -----
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.config.save_snapshot(directory)
        write_json(os.path.join(directory, BUNDLE_FILE), {
            "mean": self.scaler.mean,
            "std": self.scaler.std,
            "interval_minutes": self.interval_minutes,
            "node_ids": list(self.node_ids),
            "ae_hidden": self.config.ae_hidden,
            "batch_size": self.config.batch_size,
            "updates_per_epoch": self.config.updates_per_epoch,
        })
        save_params(self.teacher.params, os.path.join(directory, "teacher"))

        cluster_dir = os.path.join(directory, "clustering")
        save_params(self.clustering.params, os.path.join(cluster_dir, "params"))
        write_matrix_csv(os.path.join(cluster_dir, "centers.csv"), self.clustering.params["mu"].data)
        write_assignments(os.path.join(cluster_dir, "assignments.csv"), self.node_ids, self.Z)

        student_dir = os.path.join(directory, "students")
        for s in self.students:
            save_params(s.params, os.path.join(student_dir, f"k_{s.index}"))
        pd.DataFrame({"student": range(len(self.rhos)), "rho": self.rhos, "val_loss": self._selected_val_losses()}) \
            .to_csv(os.path.join(student_dir, "rho.csv"), index=False, float_format="%.17g", lineterminator="\n")
        pd.DataFrame(self.rho_grid, columns=["student", "rho", "val_loss"]) \
            .to_csv(os.path.join(student_dir, "rho_grid.csv"), index=False, float_format="%.17g", lineterminator="\n")

        pd.DataFrame(self.curves, columns=["stage", "epoch", "term", "value"]) \
            .to_csv(os.path.join(directory, CURVES_FILE), index=False, float_format="%.17g", lineterminator="\n")
        logger.info("Saved trained bundle to %s", directory)
        return directory

    def _selected_val_losses(self):
        selected = []
        for k, rho in enumerate(self.rhos):
            match = [v for s, r, v in self.rho_grid if s == k and r == rho]
            selected.append(match[0] if match else float("nan"))
        return selected

    @classmethod
    def load(cls, directory):
        snapshot = os.path.join(directory, SNAPSHOT_FILE)
        if not os.path.exists(snapshot):
            raise ParseError("not a trained run directory (config.snapshot missing)", path=directory)
        meta = read_json(os.path.join(directory, BUNDLE_FILE))
        config = load_settings(snapshot)
        config.ae_hidden = int(meta["ae_hidden"])
        config.batch_size = int(meta["batch_size"])
        config.updates_per_epoch = int(meta["updates_per_epoch"])

        teacher = TeacherModel(load_params(os.path.join(directory, "teacher")), config.t_in,
                               config.horizon, config.embed_dim, config.teacher_hidden)
        cparams = load_params(os.path.join(directory, "clustering", "params"))
        n_layers = sum(1 for name in cparams if name.startswith("ae_enc_w"))
        widths = tuple([cparams["ae_enc_w1"].rows] + [cparams[f"ae_enc_w{l}"].cols for l in range(1, n_layers + 1)])
        clustering = ClusteringModel(cparams, widths, config.v, config.t_kernel_exponent)
        _, Z = read_assignments(os.path.join(directory, "clustering", "assignments.csv"))

        students = []
        for k in range(Z.shape[1]):
            params = load_params(os.path.join(directory, "students", f"k_{k}"))
            students.append(StudentModel(k, params, config.t_in, config.horizon,
                                         config.embed_dim, config.student_hidden))
        rho_frame = pd.read_csv(os.path.join(directory, "students", "rho.csv"), float_precision="round_trip")
        grid_frame = pd.read_csv(os.path.join(directory, "students", "rho_grid.csv"), float_precision="round_trip")
        curves = pd.read_csv(os.path.join(directory, CURVES_FILE), float_precision="round_trip")

        return cls(
            config=config,
            scaler=Scaler(float(meta["mean"]), float(meta["std"])),
            node_ids=tuple(meta["node_ids"]),
            teacher=teacher,
            clustering=clustering,
            Z=Z,
            students=students,
            rhos=[float(r) for r in rho_frame["rho"]],
            rho_grid=[(int(s), float(r), float(v)) for s, r, v in grid_frame.itertuples(index=False)],
            curves=[tuple(row) for row in curves.itertuples(index=False)],
            interval_minutes=float(meta["interval_minutes"]),
        )


def write_assignments(path, node_ids, Z):
    """node_id, argmax sub-graph, then the membership row z_1..z_K"""
    Z = np.asarray(Z, dtype=np.float64)
    frame = pd.DataFrame(Z, columns=[f"z_{j + 1}" for j in range(Z.shape[1])])
    frame.insert(0, "cluster", np.argmax(Z, axis=1))
    frame.insert(0, "node_id", list(node_ids))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_assignments(path):
    if not os.path.exists(path):
        raise ParseError("file not found", path=path)
    frame = pd.read_csv(path, dtype={"node_id": str}, float_precision="round_trip")
    z_cols = [c for c in frame.columns if c.startswith("z_")]
    return tuple(frame["node_id"]), frame[z_cols].to_numpy(dtype=np.float64)


# ---------- Pipeline ----------

def run_pipeline(series, adjacency, config, data=None):
    """
    Train every component in order and return the TrainedBundle.

    Stage failures are re-raised as StageError naming the stage.
    """
    config.validate()
    if adjacency.n_nodes != series.n_nodes:
        raise ContractError(f"adjacency has {adjacency.n_nodes} nodes, series has {series.n_nodes}")
    data = data or prepare_data(series, config)
    state = PipelineState()

    with state.running("teacher"):
        history = []
        teacher = train_teacher(data, config, config.seed, history)
        state.record("teacher", history, "train", "val")
        state.artifacts["teacher"] = teacher
        state.artifacts["E"] = teacher.embeddings.E
        logger.info("teacher: %d epochs, best val=%.6g", len(history), min((h["eval"] for h in history), default=float("nan")))

    with state.running("ae_pretrain"):
        (E,) = state.require("E")
        model = init_clustering(config.embed_dim, config.k, config.ae_hidden, config.v,
                                config.t_kernel_exponent, derive_seed(config.seed, 3))
        history = []
        pretrain_autoencoder(model, E, config, history)
        state.record("ae_pretrain", history, "ae")
        state.artifacts["clustering"] = model

    with state.running("cluster_joint"):
        E, model = state.require("E", "clustering")
        history = []
        train_clustering(model, E, adjacency.normalized, config, history)
        state.record("cluster_joint", history, "joint")
        assignment = assign(model, E, adjacency.normalized)
        state.artifacts["Z"] = assignment.Z
        state.artifacts["P"] = assignment.P
        logger.info("cluster_joint: sub-graph sizes %s",
                    np.bincount(assignment.labels(), minlength=config.k).tolist())

    with state.running("students"):
        teacher, E, Z = state.require("teacher", "E", "Z")
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                lambda k: train_student(k, teacher, E, Z, data, config, config.rho_grid), range(config.k)))
        students, rhos, grid = [], [], []
        for k, (student, rho, _, rho_losses, history) in enumerate(results):
            students.append(student)
            rhos.append(rho)
            grid.extend((k, r, v) for r, v in rho_losses)
            state.record("students", history, f"student_{k}", f"student_{k}_val")
        state.artifacts["students"] = students

    state.advance("done")
    bundle = TrainedBundle(config, data.scaler, series.node_ids, teacher, model, Z, students,
                           rhos, grid, state.curves, data.interval_minutes)
    final_losses = final_loss_breakdown(bundle, data, adjacency, state.artifacts["P"])
    state.curves.extend(("total", 0, term, value) for term, value in final_losses.items())
    logger.info("total loss on train split: %.6g", final_losses["total"])
    return bundle


def final_loss_breakdown(bundle, data, adjacency, P):
    """Every loss term at the final parameters on the train split, plus the aggregate"""
    teacher, E, Z = bundle.teacher, bundle.embeddings, bundle.Z
    config = bundle.config
    l_teacher = chunked_mean(lambda x, y: teacher_loss(y, teacher_graph(teacher.params, x)), data.train)
    _, E_hat, Q, Zt = clustering_graph(bundle.clustering, E, adjacency.normalized)
    l_ae = reconstruction_loss(E, E_hat).item()
    l_clu, l_gnn = (t.item() for t in clustering_losses(P, Q, Zt))
    l_students = []
    for s, rho in zip(bundle.students, bundle.rhos):
        l_students.append(chunked_mean(
            lambda x, y, s=s, rho=rho: student_loss(y, teacher_graph(teacher.params, x).data,
                                                    student_graph(s.params, x, E), Z[:, s.index], rho),
            data.train))
    total = total_loss(l_teacher, l_ae, l_clu, l_gnn, l_students, config.alpha, config.beta).item()
    losses = {"teacher": l_teacher, "ae": l_ae, "clu": l_clu, "gnn": l_gnn}
    losses.update({f"student_{k}": v for k, v in enumerate(l_students)})
    losses["total"] = total
    return losses
