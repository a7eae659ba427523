import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bevsplat.synth import default_camera, synth_city

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def city():
    return synth_city(48, seed=3, max_height=12)


@pytest.fixture(scope="session")
def city_cam(city):
    return default_camera(city, 64, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
