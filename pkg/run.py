"""
Command-line entry point.

    python run.py synth    --nodes 30 --clusters 3 --steps 2000 --seed 7 --out data/
    python run.py train    --config settings.json --data data/ --out run/
    python run.py evaluate --run run/ --data data/
    python run.py cluster  --run run/ --out run/assignments.csv --data data/
    python run.py report   --run run/
"""
import argparse
import logging
import os
import sys
import time

import numpy as np

from analyzer import (
    DEFAULT_HORIZON_STEPS, cluster_histograms, cluster_profiles, cluster_quality,
    compute_metrics, count_parameters,
)
from build_report import METRICS_FILE, QUALITY_FILE, TIMING_FILE, build_report
from config import load_settings
from ensemble import DEFAULT_MEMBERS, ensemble_predict, train_ensemble
from errors import ConfigError, GraphForecastError
from graphdata import generate_synthetic, load_dataset, write_dataset
from teacher import teacher_graph
from trainer import TrainedBundle, chunked_predict, prepare_data, run_pipeline, write_assignments
from utils import write_json

logger = logging.getLogger("run")


def setup_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="[%(levelname)s] %(message)s", force=True)


def _parse_steps(text):
    try:
        steps = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--horizons expects comma-separated integers, got {text!r}") from None
    if not steps:
        raise ConfigError("--horizons needs at least one step")
    return steps


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name} is required for '{args.command}'")


# ---------- Commands ----------

def cmd_synth(args):
    _require(args, "out")
    series, adjacency, labels = generate_synthetic(args.nodes, args.clusters, args.steps,
                                                   args.seed if args.seed is not None else 0)
    write_dataset(args.out, series, adjacency, labels)
    return 0


def _training_config(args):
    config = load_settings(args.config)
    if args.seed is not None:
        config.seed = args.seed
    config.batch_size = args.batch_size
    config.workers = args.workers
    config.ae_hidden = args.ae_hidden
    config.updates_per_epoch = args.updates_per_epoch
    return config.validate()


def cmd_train(args):
    _require(args, "data", "out")
    config = _training_config(args)
    series, adjacency, _ = load_dataset(args.data)
    logger.info("Training on %d nodes x %d steps, K=%d", series.n_nodes, series.n_steps, config.k)
    bundle = run_pipeline(series, adjacency, config)
    bundle.save(args.out)
    return 0


def _load_run(args):
    _require(args, "run")
    return TrainedBundle.load(args.run)


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def cmd_evaluate(args):
    _require(args, "data")
    bundle = _load_run(args)
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    steps = _parse_steps(args.horizons)

    series, _, labels = load_dataset(args.data)
    if tuple(series.node_ids) != tuple(bundle.node_ids):
        raise ConfigError("data directory does not match the nodes the run was trained on")
    data = prepare_data(series, bundle.config)
    inputs = data.test.inputs
    truth = bundle.scaler.inverse_transform(data.test.targets)

    predictions, fused_seconds = _timed(lambda: bundle.predict(inputs))
    counts = count_parameters(bundle, args.ensemble_size)
    models = {
        "teacher": (predictions["teacher"], counts["teacher"]),
        "students": (predictions["students"], counts["students_total"] + counts["clustering"]),
        "fused": (predictions["fused"], counts["fused"]),
    }
    timing = {"fused": fused_seconds}

    if not args.no_ensemble:
        ensemble = train_ensemble(data, bundle.config, args.ensemble_size)
        horizon = bundle.config.horizon
        member_predict = lambda x, m: chunked_predict(
            lambda c: teacher_graph(m.params, c).data.reshape(len(c), -1, horizon), x)
        ens_pred, ens_seconds = _timed(lambda: ensemble_predict(ensemble, inputs, member_predict))
        models["ensemble"] = (ens_pred, ensemble.parameter_count())
        timing["ensemble"] = ens_seconds

    metrics = {}
    for name, (pred, params) in models.items():
        report = compute_metrics(truth, bundle.scaler.inverse_transform(pred), steps,
                                 bundle.interval_minutes, model=name, params=params)
        metrics[name] = report.as_dict()
        for label, values in report.horizons.items():
            logger.info("%-9s %-6s MAE=%.4f RMSE=%.4f MAPE=%s", name, label, values["mae"], values["rmse"],
                        "n/a" if values["mape"] is None else f"{values['mape']:.2f}%")

    write_json(os.path.join(out_dir, METRICS_FILE), metrics)
    write_json(os.path.join(out_dir, TIMING_FILE), timing)
    quality = {"k": bundle.k}
    if labels is not None:
        quality["ari"] = cluster_quality(bundle.Z, labels)
        logger.info("Adjusted Rand index vs planted labels: %.4f", quality["ari"])
    write_json(os.path.join(out_dir, QUALITY_FILE), quality)
    logger.info("[SUMMARY] fused params=%d ensemble params=%d", counts["fused"], counts["ensemble"])
    return 0


def cmd_cluster(args):
    bundle = _load_run(args)
    out_path = args.out or os.path.join(args.run, "assignments.csv")
    if os.path.dirname(out_path):
        os.makedirs(os.path.dirname(out_path), exist_ok=True)
    write_assignments(out_path, bundle.node_ids, bundle.Z)
    logger.info("Wrote %d node assignments to %s", len(bundle.node_ids), out_path)
    sizes = np.bincount(np.argmax(bundle.Z, axis=1), minlength=bundle.k)
    logger.info("Sub-graph sizes: %s", sizes.tolist())

    if args.data is None:
        logger.warning("No --data given, skipping sub-graph profiles")
        return 0
    series, _, labels = load_dataset(args.data)
    folder = os.path.dirname(out_path) or "."
    cluster_profiles(bundle.Z, series.values).to_csv(
        os.path.join(folder, "cluster_profiles.csv"), index=False, float_format="%.17g", lineterminator="\n")
    cluster_histograms(bundle.Z, series.values).to_csv(
        os.path.join(folder, "cluster_histograms.csv"), index=False, float_format="%.17g", lineterminator="\n")
    if labels is not None:
        logger.info("Adjusted Rand index vs planted labels: %.4f", cluster_quality(bundle.Z, labels))
    return 0


def cmd_report(args):
    _require(args, "run")
    build_report(args.run, args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "cluster": cmd_cluster,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="settings file (JSON or key=value)")
    common.add_argument("--out", default=None)
    common.add_argument("--data", default=None, help="directory with series.csv and adjacency.csv")
    common.add_argument("--run", default=None, help="trained run directory")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="run.py", description="Graph forecasting with sub-graph distillation")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,evaluate,cluster,report}")

    synth = sub.add_parser("synth", parents=[common], help="write a planted-cluster dataset")
    synth.add_argument("--nodes", type=int, default=30)
    synth.add_argument("--clusters", type=int, default=3)
    synth.add_argument("--steps", type=int, default=2000)

    train = sub.add_parser("train", parents=[common], help="run the staged training pipeline")
    train.add_argument("--batch-size", type=int, default=32)
    train.add_argument("--workers", type=int, default=1, help="threads for student training")
    train.add_argument("--ae-hidden", type=int, default=32)
    train.add_argument("--updates-per-epoch", type=int, default=20,
                       help="Adam updates per epoch in the full-batch AE and clustering stages")

    evaluate = sub.add_parser("evaluate", parents=[common], help="test-split metrics for every model")
    evaluate.add_argument("--horizons", default=",".join(str(s) for s in DEFAULT_HORIZON_STEPS))
    evaluate.add_argument("--ensemble-size", type=int, default=DEFAULT_MEMBERS)
    evaluate.add_argument("--no-ensemble", action="store_true")

    sub.add_parser("cluster", parents=[common], help="export sub-graph memberships")
    sub.add_parser("report", parents=[common], help="render report.html and metrics.csv")
    return parser


def cli_dispatch(argv=None):
    """Run one subcommand; returns 0 on success, 1 on a failed stage, 2 on bad usage"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if args.command not in COMMANDS:
        parser.print_usage(sys.stderr)
        return 2

    setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except GraphForecastError as e:
        logger.error("%s", e)
        return 1
    except OSError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(cli_dispatch(sys.argv[1:]))
