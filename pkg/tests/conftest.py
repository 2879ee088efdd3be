import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def _seed_numpy():
    # Legacy global state should never leak between tests; everything in the
    # package itself uses explicit Generators.
    np.random.seed(0)
