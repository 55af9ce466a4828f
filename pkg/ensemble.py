"""
Ensemble baseline: M teacher-architecture models that differ only by seed,
averaged at prediction time.
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, ContractError
from teacher import teacher_forward
from trainer import train_teacher

logger = logging.getLogger(__name__)

DEFAULT_MEMBERS = 4


@dataclass
class EnsembleModel:
    members: list          # TeacherModel

    def __post_init__(self):
        if len(self.members) < 2:
            raise ConfigError(f"an ensemble needs at least 2 members, got {len(self.members)}")
        shapes = {(m.t_in, m.horizon, m.embed_dim, m.hidden, m.n_nodes) for m in self.members}
        if len(shapes) != 1:
            raise ContractError("ensemble members must share one architecture")

    def __len__(self):
        return len(self.members)

    def parameter_count(self):
        return int(sum(m.parameter_count() for m in self.members))


def train_ensemble(data, config, members=DEFAULT_MEMBERS):
    """Train members with seeds seed+1 .. seed+members on the same windows"""
    models = []
    for i in range(1, members + 1):
        logger.info("Training ensemble member %d/%d (seed %d)", i, members, config.seed + i)
        models.append(train_teacher(data, config, config.seed + i))
    return EnsembleModel(models)


def ensemble_predict(models, window, predict=teacher_forward):
    """Unweighted mean of the member forecasts for one window (or a stack)"""
    members = models.members if isinstance(models, EnsembleModel) else list(models)
    outputs = [np.asarray(predict(window, m), dtype=np.float64) for m in members]
    if not outputs:
        raise ContractError("ensemble_predict needs at least one member")
    if any(o.shape != outputs[0].shape for o in outputs):
        raise ContractError(f"member predictions disagree in shape: {sorted({o.shape for o in outputs})}")
    total = np.zeros_like(outputs[0])
    for o in outputs:
        total += o
    return total / len(outputs)
