import numpy as np
import pytest

from triflow import tensor as T
from triflow.models import DataConfig, ModelConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        in_channels=1,
        downsample=2,
        feature_dim=8,
        corr_dim=8,
        flow_dim=4,
        motion_dim=8,
        hidden_dim=8,
        corr_levels=2,
        corr_radius=1,
    )


@pytest.fixture
def tiny_data_config():
    return DataConfig(height=16, width=16, frame_count=5, channels=1, count=2, eval_count=1)


@pytest.fixture
def tiny_train_config(tiny_model_config, tiny_data_config):
    return TrainConfig(
        iters=2,
        clip_length=5,
        steps=2,
        batch_size=1,
        lr=1e-3,
        model=tiny_model_config,
        data=tiny_data_config,
    )


@pytest.fixture
def frames(rng):
    """Seven random single-channel 8×8 frames."""
    return [rng.uniform(size=(1, 8, 8)) for _ in range(7)]
