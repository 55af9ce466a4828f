"""
Forecast and clustering analysis: per-horizon error metrics, parameter
accounting for every compared model, and sub-graph quality/profiles.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_rand_score

from errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_HORIZON_STEPS = (3, 6, 12)
MAPE_THRESHOLD = 1e-3
PROFILE_PERCENTILES = (5, 25, 50, 75, 95)
HISTOGRAM_BINS = 20


def horizon_label(steps, interval_minutes=5.0):
    minutes = steps * interval_minutes
    return f"{int(minutes)}min" if float(minutes).is_integer() else f"{minutes:g}min"


@dataclass
class MetricsReport:
    model: str
    horizons: dict = field(default_factory=dict)      # label -> {"mae", "mape", "rmse"}
    params: int = None
    predict_seconds: float = None

    def as_dict(self):
        """metrics.json entry; timings are kept out so repeated reports are identical"""
        entry = {label: dict(values) for label, values in self.horizons.items()}
        if self.params is not None:
            entry["params"] = int(self.params)
        return entry

    def rows(self):
        return [{"model": self.model, "horizon": label, **values} for label, values in self.horizons.items()]


# ---------- Error metrics ----------

def _step_errors(y_true, y_pred, step):
    t = y_true[..., step - 1].reshape(-1)
    p = y_pred[..., step - 1].reshape(-1)
    return t, p


def compute_metrics(y_true, y_pred, horizon_steps=DEFAULT_HORIZON_STEPS, interval_minutes=5.0,
                    model="model", params=None):
    """
    MAE, MAPE (percent) and RMSE at each requested horizon step.

    Args:
        y_true, y_pred: aligned N x H matrices or B x N x H stacks in
            original units.
        horizon_steps: 1-based steps into the horizon.

    Returns:
        MetricsReport with one entry per step, labelled by minutes ahead.
        MAPE skips targets with |y| <= 1e-3 and is None when none remain.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ShapeError("compute_metrics", f"targets {y_true.shape} vs predictions {y_pred.shape}")
    if y_true.size == 0:
        raise ContractError("compute_metrics needs at least one target")
    H = y_true.shape[-1]
    for step in horizon_steps:
        if not 1 <= step <= H:
            raise ContractError(f"horizon step {step} outside [1, {H}]")

    report = MetricsReport(model, params=params)
    for step in horizon_steps:
        t, p = _step_errors(y_true, y_pred, step)
        err = t - p
        mae = float(np.mean(np.abs(err)))
        rmse = float(np.sqrt(np.mean(err * err)))

        mask = np.abs(t) > MAPE_THRESHOLD
        mape = float(100.0 * np.mean(np.abs(err[mask]) / np.abs(t[mask]))) if mask.any() else None

        report.horizons[horizon_label(step, interval_minutes)] = {"mae": mae, "mape": mape, "rmse": rmse}
        logger.debug("%s @ %d steps: MAE=%.4f RMSE=%.4f MAPE=%s", model, step, mae, rmse, mape)
    return report


# ---------- Complexity ----------

def count_parameters(bundle, ensemble_size=4):
    """
    Element counts per model. The fused model counts the teacher, the clustering
    networks and every student; the ensemble is ensemble_size teachers.
    """
    counts = bundle.parameter_counts()
    students_total = int(sum(counts["students"]))
    fused = counts["teacher"] + counts["clustering"] + students_total
    return {
        "teacher": counts["teacher"],
        "clustering": counts["clustering"],
        "students": counts["students"],
        "students_total": students_total,
        "fused": fused,
        "ensemble": ensemble_size * counts["teacher"],
    }


def mlp_parameter_count(widths):
    """Weights plus biases of a dense stack with the given layer widths"""
    return int(sum(a * b + b for a, b in zip(widths[:-1], widths[1:])))


# ---------- Sub-graphs ----------

def cluster_quality(Z, labels):
    """Adjusted Rand index of argmax memberships against planted labels"""
    predicted = np.argmax(np.asarray(Z), axis=1)
    labels = np.asarray(labels)
    if labels.shape != predicted.shape:
        raise ShapeError("cluster_quality", f"{labels.shape[0]} labels for {predicted.shape[0]} nodes")
    return float(adjusted_rand_score(labels, predicted))


def cluster_profiles(Z, values):
    """
    Per sub-graph (argmax membership): node count, then mean, std and
    percentiles of the member nodes' series values.
    """
    assigned = np.argmax(np.asarray(Z), axis=1)
    values = np.asarray(values, dtype=np.float64)
    rows = []
    for j in range(np.asarray(Z).shape[1]):
        members = values[assigned == j]
        row = {"subgraph": j, "nodes": int(members.shape[0])}
        if members.size:
            flat = members.reshape(-1)
            row["mean"] = float(flat.mean())
            row["std"] = float(flat.std())
            for q, v in zip(PROFILE_PERCENTILES, np.percentile(flat, PROFILE_PERCENTILES)):
                row[f"p{q}"] = float(v)
        else:
            row.update({"mean": np.nan, "std": np.nan, **{f"p{q}": np.nan for q in PROFILE_PERCENTILES}})
        rows.append(row)
    return pd.DataFrame(rows)


def cluster_histograms(Z, values, bins=HISTOGRAM_BINS):
    """Value histograms per sub-graph on bins shared by all sub-graphs"""
    assigned = np.argmax(np.asarray(Z), axis=1)
    values = np.asarray(values, dtype=np.float64)
    edges = np.histogram_bin_edges(values.reshape(-1), bins=bins)
    rows = []
    for j in range(np.asarray(Z).shape[1]):
        counts, _ = np.histogram(values[assigned == j].reshape(-1), bins=edges)
        for left, right, c in zip(edges[:-1], edges[1:], counts):
            rows.append({"subgraph": j, "bin_left": float(left), "bin_right": float(right), "count": int(c)})
    return pd.DataFrame(rows)
