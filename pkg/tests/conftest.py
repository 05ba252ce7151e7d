import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cbicurves.model import MultiCurveModel
from cbicurves.synthetic import cir_mechanism, flat_curves, sloped_curves, table3_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# flat synthetic curves produce negative spread shifts; the warning is expected
warnings.filterwarnings("ignore", message="fitted spread shifts")


@pytest.fixture(scope="session")
def t3_params():
    return table3_params()


@pytest.fixture(scope="session")
def t3_mech(t3_params):
    return t3_params.mechanism


@pytest.fixture(scope="session")
def flat():
    return flat_curves()


@pytest.fixture(scope="session")
def sloped():
    return sloped_curves()


@pytest.fixture(scope="session")
def t3_model(t3_params, flat):
    return MultiCurveModel(t3_params, flat)


@pytest.fixture(scope="session")
def thin_model(flat):
    """Table 3 with theta = 0.3: lighter jump tails, so every moment used below is finite."""
    return MultiCurveModel(table3_params(theta=0.3), flat)


@pytest.fixture(scope="session")
def cir():
    return cir_mechanism()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
