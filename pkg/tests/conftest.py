import pytest

from carbonserve.carbon import GpuSpec
from carbonserve.config import load_settings


@pytest.fixture(scope="session")
def settings():
    return load_settings()


@pytest.fixture(scope="session")
def gpus(settings):
    return settings.gpus


@pytest.fixture(scope="session")
def models(settings):
    return settings.models


@pytest.fixture(scope="session")
def apps(settings):
    return settings.apps


@pytest.fixture
def ideal_a100():
    """A100 at datasheet peak with no per-pass overhead."""
    return GpuSpec("A100", 40, 1555, 826, 400, 60, 312, 26.34, 2020,
                   compute_efficiency=1.0, memory_efficiency=1.0)
