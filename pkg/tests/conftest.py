import warnings

import numpy as np
import pytest

from dmle2e.channel import load_channel_config


@pytest.fixture(scope="session")
def channel_cfg():
    return load_channel_config()


@pytest.fixture(autouse=True)
def _quiet_operating_point_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*outside the calibrated.*")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running pipeline tests")
