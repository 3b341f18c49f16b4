import numpy as np
import pytest

from alignrec.benchmarks import small_setup
from alignrec.data import generate_synthetic
from alignrec.system import Recommender
from alignrec.training import pretrain


@pytest.fixture(scope="session")
def small_bundle():
    spec, _ = small_setup(0)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_cfg():
    return small_setup(0)[1]


@pytest.fixture(scope="session")
def trained_system(small_bundle, small_cfg):
    """Pretrained system on the small synthetic set (shared, treat as read-only)."""
    system = Recommender.build(small_bundle.catalog, small_cfg)
    pretrain(system, small_bundle.interactions.take(np.arange(2100)))
    return system


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
