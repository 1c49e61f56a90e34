import numpy as np
import pytest

from ptta.networks import EncoderConfig, init_partition
from ptta.synthdata import DomainProfile, generate_scene, make_pair


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return EncoderConfig(feature_dim=8, hidden=8, k=4, proj_dim=4,
                         head_hidden=8, dec_hidden=8)


@pytest.fixture
def small_partition(rng, small_config):
    return init_partition(small_config, rng)


@pytest.fixture
def small_profile():
    return DomainProfile(name="unit", point_count=64, noise_sigma=0.003,
                         outlier_fraction=0.05, overlap_ratio=0.7)


@pytest.fixture
def small_pair(rng, small_profile):
    scene = generate_scene(small_profile, rng)
    return make_pair(scene, small_profile, rng, pair_id="unit_pair")
