import json

import numpy as np
import pytest

from config import ExperimentConfig
from data import gen_mixture
from models import NetworkSpec, Role

from helpers import TINY_MIXTURE, tiny_config_doc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    return gen_mixture(TINY_MIXTURE)


@pytest.fixture
def tiny_specs():
    teacher = NetworkSpec(input_dim=5, hidden_dims=(12,), num_classes=3, embed_dim=4, role=Role.TEACHER)
    student = NetworkSpec(input_dim=5, hidden_dims=(4,), num_classes=3, embed_dim=4, role=Role.STUDENT)
    return teacher, student


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return ExperimentConfig.model_validate(tiny_config_doc())


@pytest.fixture
def write_config(tmp_path):
    def _write(doc: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return path
    return _write
