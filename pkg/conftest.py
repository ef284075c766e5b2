import pytest

from App.core.config import TrainConfig
from App.services.generator import build_model
from App.services.gradcheck import TINY_CONFIG, jitter_parameters
from App.services.synthdata import generate_records
from App.services.trainer import make_batch


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(**TINY_CONFIG)


@pytest.fixture
def records():
    return generate_records(8, seed=3, ambiguous_fraction=0.5)


@pytest.fixture
def batch(records):
    return make_batch(records[:4])


@pytest.fixture
def model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture
def jittered(tiny_config):
    """Tiny model with non-zero readouts and FiLM maps."""
    return jitter_parameters(build_model(tiny_config), seed=1)
