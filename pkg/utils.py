import json
import os

import numpy as np
import pandas as pd

from errors import ParseError, ShapeError
from numcore import ParamSet

MANIFEST_FILE = "manifest.json"
FLOAT_FORMAT = "%.17g"


# ---------- JSON ----------
def write_json(path, data):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    if not os.path.exists(path):
        raise ParseError("file not found", path=path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", path=path, line=e.lineno) from None


# ---------- Matrices ----------
def write_matrix_csv(path, matrix):
    """Header-less CSV, full precision so reloads are exact"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    pd.DataFrame(matrix).to_csv(path, header=False, index=False,
                                float_format=FLOAT_FORMAT, lineterminator="\n")


def read_matrix_csv(path, shape=None):
    if not os.path.exists(path):
        raise ParseError("file not found", path=path)
    if os.path.getsize(path) == 0:
        matrix = np.zeros((0, 0))
    else:
        try:
            matrix = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip").to_numpy()
        except (ValueError, pd.errors.ParserError) as e:
            raise ParseError(f"not a numeric matrix ({e})", path=path) from None
    if shape is not None:
        shape = tuple(shape)
        if matrix.size == 0 and 0 in shape:
            matrix = np.zeros(shape)
        if matrix.shape != shape:
            raise ShapeError("read_matrix_csv", f"{path} holds {matrix.shape}, expected {shape}")
    return matrix


# ---------- Parameter checkpoints ----------
def save_params(params, directory):
    """One <name>.csv per parameter plus manifest.json with names and shapes in order"""
    os.makedirs(directory, exist_ok=True)
    manifest = {"parameters": [], "count": params.count()}
    for name, tensor in params.items():
        write_matrix_csv(os.path.join(directory, f"{name}.csv"), tensor.data)
        manifest["parameters"].append({"name": name, "shape": list(tensor.shape)})
    write_json(os.path.join(directory, MANIFEST_FILE), manifest)
    return directory


def load_params(directory):
    manifest = read_json(os.path.join(directory, MANIFEST_FILE))
    params = ParamSet()
    for entry in manifest.get("parameters", []):
        path = os.path.join(directory, f"{entry['name']}.csv")
        params.add(entry["name"], read_matrix_csv(path, entry["shape"]))
    return params
