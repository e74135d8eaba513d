import numpy as np
import pytest

from respox.config import tiny_model_config
from respox.data import crop_to_multiple
from respox.model import build_model
from respox.synth import SynthProfile, synth_generate


@pytest.fixture(scope="session")
def micro_cfg():
    return tiny_model_config("micro")


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_model_config("tiny")


@pytest.fixture(scope="session")
def micro_records():
    """Six short nights sized for the micro position budget."""
    profile = SynthProfile(seed=3, nights=6, duration_s=96)
    return [crop_to_multiple(r) for r in synth_generate(profile)]


@pytest.fixture(scope="session")
def micro_params(micro_cfg):
    return build_model(micro_cfg, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
