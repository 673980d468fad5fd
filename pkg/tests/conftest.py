import numpy as np
import pytest

from dropin.lightfield import EnvironmentMap, SgLightingParams
from dropin.shapes import make_toy_scene


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240809)


@pytest.fixture(scope="session")
def small_scene():
    return make_toy_scene(resolution=(24, 32), sphere=True)


@pytest.fixture()
def random_env(rng):
    return EnvironmentMap(0.05 + rng.random((16, 32, 3)))


def random_lighting(rng, n=4, zenith_bias=1.0):
    axes = rng.normal(size=(n, 3))
    axes[:, 2] += zenith_bias
    return SgLightingParams(
        rng.normal(0.0, 0.5, (n, 3)),
        axes,
        rng.uniform(np.log(0.2), np.log(1.0), n),
    )
