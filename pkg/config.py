"""
Training configuration: defaults, loading, validation and snapshotting.

Settings come from a JSON file (settings.json, see settings.example.json)
or from a flat key=value text file; both use the same keys.
"""
import json
import logging
import os
from dataclasses import dataclass, field, fields

from errors import ConfigError
from graphdata import SplitSpec

logger = logging.getLogger(__name__)

SETTINGS_FILE = "settings.json"
SNAPSHOT_FILE = "config.snapshot"
EXPONENT_MODES = ("as_printed", "dec_standard")
DEFAULT_RHO_GRID = tuple(round(0.1 * i, 1) for i in range(10))

# fixed key order for snapshots
CONFIG_KEYS = (
    "k", "alpha", "beta", "rho_grid", "v", "t_kernel_exponent", "t_in", "horizon",
    "embed_dim", "teacher_hidden", "student_hidden", "lr", "epochs_teacher",
    "epochs_ae", "epochs_cluster", "epochs_student", "p_refresh", "patience",
    "seed", "split",
)


@dataclass
class TrainConfig:
    k: int = 4
    alpha: float = 0.1
    beta: float = 0.1
    rho_grid: tuple = DEFAULT_RHO_GRID
    v: float = 1.0
    t_kernel_exponent: str = "as_printed"
    t_in: int = 12
    horizon: int = 12
    embed_dim: int = 16
    teacher_hidden: int = 64
    student_hidden: int = 16
    lr: float = 1e-3
    epochs_teacher: int = 100
    epochs_ae: int = 50
    epochs_cluster: int = 100
    epochs_student: int = 100
    p_refresh: int = 5
    patience: int = 10
    seed: int = 0
    split: tuple = (0.7, 0.1, 0.2)

    # command-line knobs, not part of the settings file
    batch_size: int = field(default=32, metadata={"cli": True})
    workers: int = field(default=1, metadata={"cli": True})
    ae_hidden: int = field(default=32, metadata={"cli": True})
    updates_per_epoch: int = field(default=20, metadata={"cli": True})

    @property
    def split_spec(self):
        return SplitSpec(*self.split)

    def validate(self):
        """Raise ConfigError on the first out-of-range value"""
        checks = [
            (self.k >= 1, f"k must be >= 1, got {self.k}"),
            (self.alpha > 0, f"alpha must be > 0, got {self.alpha}"),
            (self.beta > 0, f"beta must be > 0, got {self.beta}"),
            (self.v > 0, f"v must be > 0, got {self.v}"),
            (len(self.rho_grid) > 0, "rho_grid must not be empty"),
            (all(0.0 <= r <= 1.0 for r in self.rho_grid), f"rho_grid values must lie in [0, 1], got {list(self.rho_grid)}"),
            (self.t_kernel_exponent in EXPONENT_MODES,
             f"t_kernel_exponent must be one of {', '.join(EXPONENT_MODES)}, got {self.t_kernel_exponent!r}"),
            (self.t_in >= 1, f"t_in must be >= 1, got {self.t_in}"),
            (self.horizon >= 1, f"horizon must be >= 1, got {self.horizon}"),
            (self.embed_dim >= 1, f"embed_dim must be >= 1, got {self.embed_dim}"),
            (self.student_hidden >= 1, f"student_hidden must be >= 1, got {self.student_hidden}"),
            (self.student_hidden < self.teacher_hidden,
             f"student_hidden ({self.student_hidden}) must be smaller than teacher_hidden ({self.teacher_hidden})"),
            (self.lr >= 0, f"lr must be >= 0, got {self.lr}"),
            (min(self.epochs_teacher, self.epochs_ae, self.epochs_cluster, self.epochs_student) >= 0,
             "epoch counts must be >= 0"),
            (self.p_refresh >= 1, f"p_refresh must be >= 1, got {self.p_refresh}"),
            (self.patience >= 0, f"patience must be >= 0, got {self.patience}"),
            (self.batch_size >= 1, f"batch size must be >= 1, got {self.batch_size}"),
            (self.workers >= 1, f"workers must be >= 1, got {self.workers}"),
            (self.ae_hidden >= 0, f"AE hidden width must be >= 0, got {self.ae_hidden}"),
            (self.updates_per_epoch >= 1, f"updates per epoch must be >= 1, got {self.updates_per_epoch}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if len(self.split) != 3:
            raise ConfigError(f"split needs three fractions, got {list(self.split)}")
        try:
            self.split_spec
        except Exception as e:
            raise ConfigError(f"invalid split: {e}") from None
        return self

    def snapshot(self):
        """Flat key=value text; saving the same config twice gives identical bytes"""
        lines = [f"{key}={_render(getattr(self, key))}" for key in CONFIG_KEYS]
        return "\n".join(lines) + "\n"

    def save_snapshot(self, directory):
        path = os.path.join(directory, SNAPSHOT_FILE)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.snapshot())
        return path


def _render(value):
    if isinstance(value, (tuple, list)):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------- Parsing ----------

def _field_types():
    return {f.name: f.type for f in fields(TrainConfig) if not f.metadata.get("cli")}


def _coerce(key, raw, kind):
    try:
        if kind is tuple:
            if isinstance(raw, (list, tuple)):
                return tuple(float(v) for v in raw)
            return tuple(float(v) for v in str(raw).split(",") if v.strip())
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if kind is float:
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for '{key}': {raw!r}") from None


def parse_settings(values):
    """Build a validated TrainConfig from a mapping of setting names to raw values"""
    types = _field_types()
    parsed = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown setting '{key}'")
        parsed[key] = _coerce(key, raw, types[key])
    return TrainConfig(**parsed).validate()


def _read_key_values(path):
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {number}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def load_settings(path=None):
    """
    Load settings from a JSON or key=value file.

    Args:
        path: settings file; defaults to settings.json in the working
            directory, or built-in defaults when that does not exist.

    Returns:
        A validated TrainConfig. Missing keys take their defaults.
    """
    if path is None:
        if not os.path.exists(SETTINGS_FILE):
            logger.info("No %s found, using default settings", SETTINGS_FILE)
            return TrainConfig().validate()
        path = SETTINGS_FILE
    if not os.path.exists(path):
        raise ConfigError(f"settings file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        head = f.read().lstrip()
    if head.startswith("{"):
        try:
            values = json.loads(head)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    else:
        values = _read_key_values(path)
    return parse_settings(values)
