import numpy as np
import pytest

from efta import AttnConfig, random_qkv
from efta.campaign import calibrate_thresholds


@pytest.fixture(scope="session")
def small_cfg():
    return AttnConfig(64, 32, 16, 8)


@pytest.fixture(scope="session")
def small_thr(small_cfg):
    return calibrate_thresholds(small_cfg, 200, 2.0, seed=12345)


@pytest.fixture(scope="session")
def decoupled_thr(small_cfg):
    return calibrate_thresholds(small_cfg, 200, 2.0, seed=12345, mode="decoupled")


@pytest.fixture
def qkv(small_cfg):
    return random_qkv(small_cfg, np.random.default_rng(2024))
