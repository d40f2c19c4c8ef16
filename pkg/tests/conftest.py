import numpy as np
import pytest

from headforge.model import synthesize_model
from headforge.scene import SceneSpec, synth_scene


@pytest.fixture(scope="session")
def model():
    return synthesize_model(seed=1, n_subdiv=3)


@pytest.fixture(scope="session")
def scene64():
    return synth_scene(SceneSpec(seed=0, size=64))


@pytest.fixture(scope="session")
def scene96():
    return synth_scene(SceneSpec(seed=5, size=96))


@pytest.fixture(scope="session")
def scene128():
    return synth_scene(SceneSpec(seed=3, size=128))


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
