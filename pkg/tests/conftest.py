import numpy as np
import pytest

from ringlab.diffusion import NoiseSchedule
from ringlab.mixture import MixtureModel
from ringlab.watermark import build_ring_mask


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def model(schedule):
    return MixtureModel.default(schedule.alpha_bar)


@pytest.fixture(scope="session")
def mask():
    return build_ring_mask(32, 32, 0.7)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def lab():
    from ringlab.config import RunConfig
    from ringlab.pipeline import Lab
    return Lab(RunConfig())


@pytest.fixture(scope="session")
def artifact(lab):
    from ringlab.pipeline import run_optimize
    art, _ = run_optimize(lab)
    return art
