import numpy as np
import pytest

from flow_ingest import (
    DEFAULT_FEATURE_COLUMNS,
    DURATION,
    SYNTHETIC_CLASS_TABLE,
    FlowEncoder,
    RawFlowRecord,
    default_schema,
    fit_normalizer,
)
from gnn_model import GnnConfig, init_parameters
from synthetic_traffic import default_mix, generate_dataset

FEATURE_NAMES = [name for name in DEFAULT_FEATURE_COLUMNS if name != DURATION]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def make_record():
    """Factory for records over the default schema; unspecified features are 1.0."""

    def factory(src="10.0.0.1", dst="10.0.0.2", label="BENIGN", timestamp=0.0, duration=1e6,
                src_port=50000, dst_port=80, features=None):
        values = {name: 1.0 for name in FEATURE_NAMES}
        values.update(features or {})
        return RawFlowRecord(src, dst, src_port, dst_port, 6, float(timestamp), float(duration), values, label)

    return factory


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(default_mix(), 8, 200, np.random.default_rng(7))


@pytest.fixture(scope="session")
def synthetic_encoder(small_dataset):
    schema = default_schema()
    return FlowEncoder(schema, fit_normalizer(small_dataset.records, schema), SYNTHETIC_CLASS_TABLE)


@pytest.fixture
def tiny_config():
    return GnnConfig(feature_count=3, class_count=3, hidden_dim=4, iterations=2,
                     message_hidden=5, readout_hidden=(6, 4))


@pytest.fixture
def jittered_params():
    """Parameters with small random biases, so no ReLU input sits exactly at its kink."""

    def build(config, seed=0):
        rng = np.random.default_rng(seed)
        params = init_parameters(config, rng)
        for name, tensor in params.items():
            if tensor.data.ndim == 1:
                tensor.data = rng.normal(0.0, 0.1, size=tensor.shape)
        return params

    return build
