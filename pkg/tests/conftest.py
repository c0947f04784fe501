import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def well_conditioned(n, rng, shift=None):
    """Random square matrix pushed away from singularity by a diagonal shift."""
    m = rng.standard_normal((n, n))
    return m + (n if shift is None else shift) * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
