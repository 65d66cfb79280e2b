import numpy as np
import pytest

from consistent_evidence.core.constraints import load_spec, parse_spec
from consistent_evidence.core.model import init
from consistent_evidence.core.synthdata import GenConfig, generate
from consistent_evidence.core.trainer import TrainConfig
from consistent_evidence.utiles import data

SMALL_SPEC = {
    "num_classes": 3,
    "evidence": ["a", "b", "c", "d"],
    "direct_support": {"1": ["a", "b"], "2": ["c"]},
    "derive": "higher-direct",
}


@pytest.fixture(scope="session")
def edema():
    return load_spec(data.EDEMA_SPEC_FILE)


@pytest.fixture(scope="session")
def small_spec():
    return parse_spec(SMALL_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params(edema):
    return init(7, 3, 4, edema)


@pytest.fixture(scope="session")
def small_gen_config():
    return GenConfig(n_train=300, n_validation=100, n_test=100, dim=8, sigma=0.5, p_evidence_label=0.5, seed=3)


@pytest.fixture(scope="session")
def small_dataset(edema, small_gen_config):
    return generate(small_gen_config, edema)


@pytest.fixture
def quick_train_config():
    return TrainConfig(
        steps=60, eval_interval=20, hidden=8, batch_size=16, learning_rate=1e-2, seeds=(0,), reg_warmup=0
    )
