"""
Graph time-series datasets: CSV loading, adjacency normalization,
windowing, chronological splits, z-scoring and a planted-cluster
synthetic generator.
"""
import csv
import logging
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import (
    ConfigError, DomainError, EmptyDatasetError, InsufficientDataError,
    ParseError, ShapeError, UnknownNodeError,
)

logger = logging.getLogger(__name__)

SERIES_FILE = "series.csv"
ADJACENCY_FILE = "adjacency.csv"
LABELS_FILE = "labels.csv"
EDGE_LIST_HEADER = ["src", "dst", "weight"]


@dataclass(frozen=True)
class TimeSeriesMatrix:
    node_ids: tuple
    values: np.ndarray            # N x T
    interval_minutes: float = 5.0
    missing_mask: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError("TimeSeriesMatrix", f"values must be N x T, got {values.shape}")
        if values.shape[0] != len(self.node_ids):
            raise ShapeError("TimeSeriesMatrix", f"{len(self.node_ids)} node ids for {values.shape[0]} rows")
        if len(set(self.node_ids)) != len(self.node_ids):
            raise ParseError("node ids must be unique")
        if not np.all(np.isfinite(values)):
            raise DomainError("series values must be finite; record gaps in missing_mask")
        if self.interval_minutes <= 0:
            raise ConfigError("interval_minutes must be positive")
        mask = self.missing_mask
        if mask is None:
            mask = np.zeros(values.shape, dtype=bool)
        mask = np.array(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ShapeError("TimeSeriesMatrix", f"missing_mask {mask.shape} vs values {values.shape}")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)

    @property
    def n_nodes(self):
        return self.values.shape[0]

    @property
    def n_steps(self):
        return self.values.shape[1]

    def segment(self, start, stop):
        return TimeSeriesMatrix(self.node_ids, self.values[:, start:stop],
                                self.interval_minutes, self.missing_mask[:, start:stop])

    def with_values(self, values):
        return TimeSeriesMatrix(self.node_ids, values, self.interval_minutes, self.missing_mask)


@dataclass(frozen=True)
class AdjacencyMatrix:
    raw: np.ndarray
    normalized: np.ndarray = field(default=None)

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise ShapeError("AdjacencyMatrix", f"raw weights must be square, got {raw.shape}")
        if np.any(raw < 0):
            raise DomainError("adjacency weights must be nonnegative")
        normalized = self.normalized
        if normalized is None:
            normalized = normalize_adjacency(raw)
        raw.setflags(write=False)
        normalized = np.array(normalized, dtype=np.float64)
        normalized.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", normalized)

    @property
    def n_nodes(self):
        return self.raw.shape[0]


@dataclass(frozen=True)
class WindowBatch:
    inputs: np.ndarray               # B x N x T_in
    targets: np.ndarray              # B x N x H
    window_start_indices: np.ndarray  # B

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not (0.0 < f < 1.0) for f in fractions):
            raise ConfigError(f"split fractions must lie in (0, 1), got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")


# ---------- Loading ----------

def _parser_line(error):
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def _to_float(text):
    try:
        return float(text)
    except ValueError:
        return np.nan


def _check_row_widths(path):
    """
    Every non-blank line must have as many fields as the header. Returns the
    physical line number of each non-blank row, header included.
    """
    lines = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        width = None
        for row in reader:
            if not row:
                continue
            lines.append(reader.line_num)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", path=path, line=reader.line_num)
    return lines


def load_series_csv(path, interval_minutes=5.0):
    """
    Read a row-per-timestep CSV (header row = node ids) into an N x T matrix.

    Empty cells are recorded in the missing mask and filled with the last
    observation; gaps at the start of a series take the first valid reading.
    """
    row_lines = _check_row_widths(path)
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False,
                            skip_blank_lines=True, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"{path}: no columns") from None
    except pd.errors.ParserError as e:
        raise ParseError(f"ragged row ({e})", path=path, line=_parser_line(e)) from None

    if frame.shape[1] == 0:
        raise EmptyDatasetError(f"{path}: no columns")
    node_ids = [str(c).strip() for c in frame.iloc[0].tolist()]
    if any(c == "" for c in node_ids):
        raise ParseError("empty node id in header", path=path, line=1)
    if len(set(node_ids)) != len(node_ids):
        raise ParseError("duplicate node id in header", path=path, line=1)

    body = frame.iloc[1:]
    if body.shape[0] == 0:
        raise EmptyDatasetError(f"{path}: header only, no timesteps")

    cells = body.apply(lambda col: col.str.strip())
    blank = (cells == "").to_numpy()
    numbers = cells.apply(lambda col: col.map(_to_float)).to_numpy(dtype=np.float64)
    bad = ~blank & ~np.isfinite(numbers)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        # body row i is frame row i + 1; pandas drops blank lines
        line = row_lines[row + 1] if len(row_lines) == frame.shape[0] else int(row) + 2
        raise ParseError(f"non-numeric cell {cells.iat[row, col]!r} for node {node_ids[col]}",
                         path=path, line=line)

    filled = pd.DataFrame(np.where(blank, np.nan, numbers)).ffill().bfill()
    if filled.isna().any().any():
        empty_col = int(np.argmax(filled.isna().all().to_numpy()))
        raise EmptyDatasetError(f"{path}: node {node_ids[empty_col]} has no readings")

    if blank.any():
        logger.info("%s: filled %d missing readings", path, int(blank.sum()))

    return TimeSeriesMatrix(tuple(node_ids), filled.to_numpy().T.copy(),
                            interval_minutes, blank.T.copy())


def _check_weight(value, path, line):
    if not math.isfinite(value):
        raise ParseError(f"non-finite weight {value}", path=path, line=line)
    if value < 0:
        raise DomainError(f"{path} line {line}: negative weight {value}")


def load_adjacency(path, node_ids, symmetrize=True):
    """
    Read a dense N x N CSV (no header) or an edge list with header
    src,dst,weight. Edge lists sum duplicate edges; symmetrize keeps the
    larger of W_ij and W_ji on both sides.
    """
    node_ids = [str(n) for n in node_ids]
    index = {n: i for i, n in enumerate(node_ids)}
    n = len(node_ids)

    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"{path}: empty adjacency file") from None
    except pd.errors.ParserError as e:
        raise ParseError(f"ragged row ({e})", path=path, line=_parser_line(e)) from None

    header = [str(c).strip().lower() for c in frame.iloc[0].tolist()]
    if header == EDGE_LIST_HEADER:
        raw = np.zeros((n, n))
        for row_no, (src, dst, weight) in enumerate(frame.iloc[1:].itertuples(index=False), start=2):
            src, dst = str(src).strip(), str(dst).strip()
            for node in (src, dst):
                if node not in index:
                    raise UnknownNodeError(f"{path} line {row_no}: unknown node id '{node}'")
            try:
                value = float(weight)
            except (TypeError, ValueError):
                raise ParseError(f"non-numeric weight {weight!r}", path=path, line=row_no) from None
            _check_weight(value, path, row_no)
            raw[index[src], index[dst]] += value
        if symmetrize:
            raw = np.maximum(raw, raw.T)
    else:
        numbers = frame.apply(lambda col: col.str.strip().map(_to_float))
        if numbers.isna().any().any():
            row = int(np.argmax(numbers.isna().any(axis=1).to_numpy()))
            raise ParseError("non-numeric cell in dense adjacency", path=path, line=row + 1)
        raw = numbers.to_numpy(dtype=np.float64)
        if raw.shape != (n, n):
            raise ShapeError("load_adjacency", f"dense matrix is {raw.shape}, dataset has {n} nodes")
        for row in range(n):
            for value in raw[row]:
                _check_weight(value, path, row + 1)

    return AdjacencyMatrix(raw)


def load_labels(path, node_ids):
    frame = pd.read_csv(path, dtype={"node_id": str})
    labels = dict(zip(frame["node_id"].astype(str), frame["true_cluster"].astype(int)))
    missing = [n for n in node_ids if n not in labels]
    if missing:
        raise UnknownNodeError(f"{path}: no label for node(s) {missing[:5]}")
    return np.array([labels[n] for n in node_ids], dtype=int)


def load_dataset(data_dir, symmetrize=True):
    """Series, adjacency and (when present) planted labels from a data directory"""
    series = load_series_csv(os.path.join(data_dir, SERIES_FILE))
    adjacency = load_adjacency(os.path.join(data_dir, ADJACENCY_FILE), series.node_ids, symmetrize)
    labels_path = os.path.join(data_dir, LABELS_FILE)
    labels = load_labels(labels_path, series.node_ids) if os.path.exists(labels_path) else None
    logger.info("Loaded %d nodes x %d steps from %s", series.n_nodes, series.n_steps, data_dir)
    return series, adjacency, labels


# ---------- Graph ----------

def normalize_adjacency(raw):
    """D^-1/2 (W + I) D^-1/2 with D_ii the row sums of W + I"""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise ShapeError("normalize_adjacency", f"expected a square matrix, got {raw.shape}")
    w_tilde = raw + np.eye(raw.shape[0])
    inv_sqrt = 1.0 / np.sqrt(w_tilde.sum(axis=1))
    return inv_sqrt[:, None] * w_tilde * inv_sqrt[None, :]


# ---------- Windows and splits ----------

def make_windows(series, t_in, horizon, stride=1):
    values = series.values if isinstance(series, TimeSeriesMatrix) else np.asarray(series, dtype=np.float64)
    n_steps = values.shape[1]
    if t_in < 1 or horizon < 1:
        raise ConfigError(f"t_in and horizon must be >= 1, got {t_in}, {horizon}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if t_in + horizon > n_steps:
        raise InsufficientDataError(f"need {t_in + horizon} steps for one window, have {n_steps}")

    starts = np.arange(0, n_steps - t_in - horizon + 1, stride)
    inputs = np.stack([values[:, s:s + t_in] for s in starts])
    targets = np.stack([values[:, s + t_in:s + t_in + horizon] for s in starts])
    return WindowBatch(inputs, targets, starts)


def split_boundaries(n_steps, spec):
    # the epsilon keeps 0.7 + 0.1 from flooring one step short
    b1 = int(math.floor(spec.train_fraction * n_steps + 1e-9))
    b2 = int(math.floor((spec.train_fraction + spec.val_fraction) * n_steps + 1e-9))
    return b1, b2


def split_dataset(series, spec=None):
    """Chronological train / val / test segments at floor(train*T), floor((train+val)*T)"""
    spec = spec or SplitSpec()
    b1, b2 = split_boundaries(series.n_steps, spec)
    lengths = (b1, b2 - b1, series.n_steps - b2)
    if min(lengths) < 1:
        raise InsufficientDataError(f"{series.n_steps} steps give empty segments {lengths}")
    return series.segment(0, b1), series.segment(b1, b2), series.segment(b2, series.n_steps)


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def fit_scaler(train):
    values = train.values if isinstance(train, TimeSeriesMatrix) else np.asarray(train)
    if values.size == 0:
        raise EmptyDatasetError("cannot fit a scaler on an empty train segment")
    return Scaler(float(values.mean()), max(float(values.std()), 1e-8))


def zscore(series, train):
    """Normalize series with the global mean / population std of the train segment"""
    scaler = fit_scaler(train)
    return series.with_values(scaler.transform(series.values)), scaler


# ---------- Synthetic data ----------

def generate_synthetic(n_nodes, k_true, t_steps, seed, interval_minutes=5.0):
    """
    Planted-cluster graph series. Node i belongs to cluster i % k_true;
    each cluster carries its own sinusoid (period and phase), nodes add an
    amplitude jitter and Gaussian noise at 0.1 of their amplitude. Edges
    weigh 1 inside a cluster and 0.05 across clusters.
    """
    if not (n_nodes >= k_true >= 1):
        raise ConfigError(f"need n_nodes >= k_true >= 1, got {n_nodes}, {k_true}")
    if t_steps < 1:
        raise ConfigError("t_steps must be >= 1")

    rng = np.random.default_rng(seed)
    labels = np.arange(n_nodes) % k_true
    t = np.arange(t_steps, dtype=np.float64)

    # periods well beyond the default 12-step window
    periods = 36.0 + 24.0 * np.arange(k_true)
    phases = 2.0 * np.pi * np.arange(k_true) / k_true
    base = np.sin(2.0 * np.pi * t[None, :] / periods[:, None] + phases[:, None])

    amplitude = 10.0 * rng.uniform(0.8, 1.2, size=n_nodes)
    noise = rng.normal(0.0, 1.0, size=(n_nodes, t_steps)) * (0.1 * amplitude)[:, None]
    values = 50.0 + amplitude[:, None] * base[labels] + noise

    same = labels[:, None] == labels[None, :]
    raw = np.where(same, 1.0, 0.05)
    np.fill_diagonal(raw, 0.0)

    width = len(str(n_nodes - 1))
    node_ids = tuple(f"n{i:0{width}d}" for i in range(n_nodes))
    series = TimeSeriesMatrix(node_ids, values, interval_minutes)
    return series, AdjacencyMatrix(raw), labels


def write_dataset(out_dir, series, adjacency, labels=None):
    """Write series.csv, dense adjacency.csv and labels.csv in the loader formats"""
    os.makedirs(out_dir, exist_ok=True)
    frame = pd.DataFrame(series.values.T, columns=list(series.node_ids))
    frame.to_csv(os.path.join(out_dir, SERIES_FILE), index=False, float_format="%.17g", lineterminator="\n")
    pd.DataFrame(adjacency.raw).to_csv(os.path.join(out_dir, ADJACENCY_FILE),
                                       index=False, header=False, float_format="%.17g", lineterminator="\n")
    if labels is not None:
        pd.DataFrame({"node_id": list(series.node_ids), "true_cluster": np.asarray(labels, dtype=int)}) \
            .to_csv(os.path.join(out_dir, LABELS_FILE), index=False, lineterminator="\n")
    logger.info("Wrote dataset (%d nodes, %d steps) to %s", series.n_nodes, series.n_steps, out_dir)
