import numpy as np
import pytest

from layercut import synthetic


@pytest.fixture(scope="session")
def scene():
    return synthetic.make_scene()


@pytest.fixture(scope="session")
def rig(scene):
    return scene.rig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
