"""
Tests for the optimizer, loss accounting and the staged pipeline
"""
import filecmp
import os

import numpy as np
import pytest

import trainer
from analyzer import cluster_quality
from clustering import assign, init_clustering
from errors import ContractError, DivergenceError, StageError
from graphdata import generate_synthetic
from numcore import ParamSet, Tensor, mul, square, sub, sum_all
from trainer import (
    PipelineState, TrainedBundle, optimize, prepare_data, pretrain_autoencoder, run_pipeline, total_loss,
    train_clustering,
)


# ---------- total_loss ----------

def test_total_loss_zero():
    assert total_loss(0.0, 0.0, 0.0, 0.0, [0.0, 0.0], 0.1, 0.1).item() == 0.0


def test_total_loss_hand_example():
    loss = total_loss(1.0, 1.0, 1.0, 1.0, [1.5, 0.5], 0.1, 0.1)
    assert loss.item() == pytest.approx(4.2, abs=1e-9)
    assert loss.provenance == "total"


def test_doubling_alpha_doubles_only_clu_term():
    base = total_loss(1.0, 2.0, 3.0, 4.0, [1.0], 0.1, 0.1).item()
    doubled = total_loss(1.0, 2.0, 3.0, 4.0, [1.0], 0.2, 0.1).item()
    assert doubled - base == pytest.approx(0.1 * 3.0, abs=1e-12)


def test_total_loss_rejects_negative_component():
    with pytest.raises(ContractError):
        total_loss(1.0, -0.1, 0.0, 0.0, [], 0.1, 0.1)


# ---------- optimize ----------

def _bowl(params):
    return sum_all(square(sub(params["p"], 3.0)))


def test_optimize_quadratic_bowl():
    params = ParamSet()
    params.add("p", [[2.0]])
    optimize(params, _bowl, steps=200, lr=0.1, patience=200)
    assert params["p"].data[0, 0] == pytest.approx(3.0, abs=1e-3)


def test_optimize_zero_lr_leaves_params():
    params = ParamSet()
    params.add("p", [[2.0, -1.0]])
    optimize(params, _bowl, steps=10, lr=0.0, patience=10)
    assert np.array_equal(params["p"].data, [[2.0, -1.0]])


def test_optimize_patience_zero_runs_one_interval():
    params = ParamSet()
    params.add("p", [[2.0]])
    calls = []

    def counted(ps):
        calls.append(1)
        return _bowl(ps)

    history = []
    optimize(params, counted, steps=30, lr=0.1, patience=0, eval_every=3, history=history)
    assert len(calls) == 3
    assert len(history) == 1


def test_optimize_returns_best_validation_state():
    params = ParamSet()
    params.add("p", [[0.0]])
    # validation prefers p near 0.25 while training pushes towards 3
    val = lambda ps: float((ps["p"].data[0, 0] - 0.25) ** 2)
    optimize(params, _bowl, steps=50, lr=0.1, patience=50, val_builder=val)
    assert abs(params["p"].data[0, 0] - 0.25) < 0.1


def test_optimize_continues_given_optimizer():
    params = ParamSet()
    params.add("p", [[2.0]])
    adam = trainer.Adam(params, 0.1)
    optimize(params, _bowl, steps=5, lr=0.1, patience=None, adam=adam, restore_best=False)
    optimize(params, _bowl, steps=5, lr=0.1, patience=None, adam=adam, restore_best=False)
    assert adam.t == 10


def test_optimize_without_restore_keeps_last_state():
    params = ParamSet()
    params.add("p", [[0.0]])
    val = lambda ps: float((ps["p"].data[0, 0] - 0.25) ** 2)
    optimize(params, _bowl, steps=50, lr=0.1, patience=None, val_builder=val, restore_best=False)
    assert params["p"].data[0, 0] > 1.0


def test_optimize_divergence():
    params = ParamSet()
    params.add("p", [[1.0]])
    with pytest.raises(DivergenceError) as excinfo:
        optimize(params, lambda ps: mul(ps["p"], Tensor(np.nan)), steps=5, lr=0.1, patience=5)
    assert excinfo.value.step == 1


# ---------- Pipeline state ----------

def test_pipeline_state_is_monotonic():
    state = PipelineState()
    state.advance("ae_pretrain")
    with pytest.raises(ContractError):
        state.advance("teacher")


def test_pipeline_state_requires_artifacts():
    state = PipelineState()
    with pytest.raises(ContractError):
        state.require("E")


# ---------- run_pipeline ----------

def test_pipeline_completes(tiny_dataset, tiny_config):
    series, adjacency, _ = tiny_dataset
    bundle = run_pipeline(series, adjacency, tiny_config)

    assert bundle.Z.shape == (6, 2)
    assert np.allclose(bundle.Z.sum(axis=1), 1.0, atol=1e-6)
    assert len(bundle.students) == 2
    assert all(r in tiny_config.rho_grid for r in bundle.rhos)
    assert all(s.parameter_count() < bundle.teacher.parameter_count() for s in bundle.students)
    stages = {row[0] for row in bundle.curves}
    assert {"teacher", "ae_pretrain", "cluster_joint", "students", "total"} <= stages


def test_single_subgraph_fusion_is_half_teacher_half_student(tiny_dataset, tiny_config):
    series, adjacency, _ = tiny_dataset
    tiny_config.k = 1
    bundle = run_pipeline(series, adjacency, tiny_config)
    assert np.array_equal(bundle.Z, np.ones((6, 1)))

    inputs = prepare_data(series, tiny_config).test.inputs[:3]
    out = bundle.predict(inputs)
    assert np.allclose(out["fused"], 0.5 * (out["teacher"] + out["students"]), atol=1e-12)


def test_degenerate_setup_names_stage(tiny_dataset, tiny_config):
    series, adjacency, _ = tiny_dataset
    tiny_config.k = 7
    with pytest.raises(StageError) as excinfo:
        run_pipeline(series, adjacency, tiny_config)
    assert excinfo.value.stage == "cluster_joint"


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(_same_tree(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_pipeline_is_deterministic(tmp_path, tiny_dataset, tiny_config):
    series, adjacency, _ = tiny_dataset
    first = run_pipeline(series, adjacency, tiny_config).save(str(tmp_path / "a"))
    second = run_pipeline(series, adjacency, tiny_config).save(str(tmp_path / "b"))
    assert _same_tree(first, second)


def test_bundle_round_trip(tmp_path, tiny_dataset, tiny_config):
    series, adjacency, _ = tiny_dataset
    bundle = run_pipeline(series, adjacency, tiny_config)
    bundle.save(str(tmp_path))
    loaded = TrainedBundle.load(str(tmp_path))

    assert loaded.node_ids == bundle.node_ids
    assert loaded.config.batch_size == tiny_config.batch_size == 8
    assert loaded.config.updates_per_epoch == tiny_config.updates_per_epoch
    assert loaded.rhos == bundle.rhos
    assert np.array_equal(loaded.Z, bundle.Z)
    inputs = prepare_data(series, tiny_config).test.inputs[:2]
    for name, values in bundle.predict(inputs).items():
        assert np.array_equal(loaded.predict(inputs)[name], values)


# ---------- joint clustering ----------

def _planted_embeddings(n_nodes, k, seed=0):
    rng = np.random.default_rng(seed)
    means = 2.0 * np.eye(k, 4)
    return means[np.arange(n_nodes) % k] + rng.normal(0.0, 0.05, size=(n_nodes, 4))


def _clustering_config(tiny_config):
    tiny_config.k = 3
    tiny_config.epochs_ae = 10
    tiny_config.epochs_cluster = 10
    tiny_config.p_refresh = 2
    return tiny_config


def test_clustering_keeps_one_optimizer_across_refreshes(monkeypatch, tiny_config):
    config = _clustering_config(tiny_config)
    _, adjacency, _ = generate_synthetic(9, 3, 60, seed=2)
    E = _planted_embeddings(9, 3)
    model = init_clustering(4, 3, config.ae_hidden, seed=0)

    created = []

    class CountingAdam(trainer.Adam):
        def __init__(self, *args, **kwargs):
            super().__init__(*args, **kwargs)
            created.append(self)

    monkeypatch.setattr(trainer, "Adam", CountingAdam)
    history = []
    train_clustering(model, E, adjacency.normalized, config, history)

    assert len(created) == 1
    assert created[0].t == config.epochs_cluster * config.updates_per_epoch
    assert [h["epoch"] for h in history] == list(range(1, config.epochs_cluster + 1))


def test_clustering_recovers_planted_groups(tiny_config):
    config = _clustering_config(tiny_config)
    _, adjacency, labels = generate_synthetic(9, 3, 60, seed=2)
    E = _planted_embeddings(9, 3)
    model = init_clustering(4, 3, config.ae_hidden, seed=0)
    pretrain_autoencoder(model, E, config)
    before = assign(model, E, adjacency.normalized).Z

    train_clustering(model, E, adjacency.normalized, config)
    after = assign(model, E, adjacency.normalized).Z

    assert cluster_quality(after, labels) == pytest.approx(1.0)
    assert after.max(axis=1).mean() > before.max(axis=1).mean()


def test_worker_count_does_not_change_students(tiny_config):
    series, adjacency, _ = generate_synthetic(9, 3, 120, seed=1)
    tiny_config.k = 3
    tiny_config.workers = 1
    serial = run_pipeline(series, adjacency, tiny_config)
    tiny_config.workers = 3
    threaded = run_pipeline(series, adjacency, tiny_config)

    assert threaded.rhos == serial.rhos
    for a, b in zip(serial.students, threaded.students):
        for name, tensor in a.params.items():
            assert np.array_equal(b.params[name].data, tensor.data), name
