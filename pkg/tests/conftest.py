import pytest

from hevtem import plant


@pytest.fixture(scope="session")
def models():
    return plant.default_models()


@pytest.fixture(scope="session")
def env20():
    return plant.EnvConditions(ambient_c=20.0, solar_w_m2=0.0)


@pytest.fixture(scope="session")
def env35():
    return plant.EnvConditions(ambient_c=35.0, solar_w_m2=500.0)
