import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bar_mask(width, length=60, shape=(40, 100), vertical=False):
    """Horizontal (or vertical) bar of odd pixel width centered in the raster."""
    m = np.zeros(shape, dtype=bool)
    h, w = shape
    cy, c0 = h // 2, (w - length) // 2
    m[cy - width // 2: cy + width // 2 + 1, c0:c0 + length] = True
    return m.T.copy() if vertical else m
