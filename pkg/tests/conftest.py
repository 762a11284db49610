import numpy as np
import pytest

from metagec.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=12, d_model=8, n_heads=2, d_ff=16, max_len=12)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, np.random.default_rng(5), scale=0.5)
