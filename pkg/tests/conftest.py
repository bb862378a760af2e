import os

import pytest

from analysis.transmon_spectrum import device_spectrum, truncate
from utils.config_loader import RunConfig, load_device, load_noise_model

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")


def data_path(*parts):
    return os.path.join(DATA_DIR, *parts)


@pytest.fixture(scope="session")
def quito_device():
    return load_device(data_path("devices", "quito.csv"))


@pytest.fixture(scope="session")
def quito_spectrum(quito_device):
    return device_spectrum(quito_device, 4, 50)


@pytest.fixture(scope="session")
def qubit_spectrum(quito_spectrum):
    return truncate(quito_spectrum, 2)


@pytest.fixture(scope="session")
def quito_noise():
    return load_noise_model(data_path("noise", "quito.csv"))


@pytest.fixture
def small_run():
    # Coarse settings for two-level idle runs
    return RunConfig(dt_ns=1.0, n_trajectories=4, n_instants=5, total_ns=2000.0, resolution=3)
