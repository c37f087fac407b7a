import numpy as np
import pytest

from lidar2photo.lidar_model import SensorConfig


@pytest.fixture
def cfg():
    return SensorConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
