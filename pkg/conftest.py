"""
Shared fixtures for the test suite
"""
import os
import sys
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest

from config import TrainConfig
from graphdata import generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    """Small enough for a full pipeline run in a few seconds"""
    return TrainConfig(
        k=2, rho_grid=(0.0, 0.5), t_in=4, horizon=3, embed_dim=4, teacher_hidden=8,
        student_hidden=4, lr=0.01, epochs_teacher=3, epochs_ae=3, epochs_cluster=4,
        epochs_student=2, p_refresh=2, patience=5, seed=0, batch_size=8, ae_hidden=3,
    ).validate()


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(6, 2, 120, seed=1)
