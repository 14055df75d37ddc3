import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_scene(rng, H=12, W=None, hole=True):
    from acdmar.wcd import MaskedScene

    W = W or H
    I = np.ones((H, W))
    if hole:
        I[H // 3:H // 3 + 2, W // 2:W // 2 + 3] = 0.0
    Y = rng.random((H, W))
    return MaskedScene(Y=Y, I=I, X_gt=rng.random((H, W)), X_li=Y + 0.01 * rng.standard_normal((H, W)))
