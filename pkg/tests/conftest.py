import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_encoder():
    from model import EncoderConfig

    return EncoderConfig(
        stem_channels=4, stem_kernel=3, stem_stride=2, stage_channels=(4,), stage_strides=(1,),
        kernel_size=3, cardinality=2, output_dim=8,
    )


@pytest.fixture
def small_model_config(small_encoder):
    from model import ModelConfig

    return ModelConfig(encoder=small_encoder, attention_reduction=4, classifier_hidden=4)


@pytest.fixture
def exact_patches():
    """Noise-free 3-dim basis: the camera response determines the spectrum exactly."""
    from phantom import SyntheticCamera, synth_patch_set

    return synth_patch_set(basis_dim=3, n_train=24, n_holdout=96, camera=SyntheticCamera(noise_sigma=0.0), seed=42)


@pytest.fixture
def default_patches():
    from phantom import synth_patch_set

    return synth_patch_set(seed=42)
