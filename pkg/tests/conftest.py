import numpy as np
import pytest

from chunkasr.config import ContextConfig, ModelConfig
from chunkasr.encoder import init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    return ModelConfig(n_layers=3, d_model=32, n_heads=2, d_ff=64,
                       kernel_size=15, vocab_size=8, l_max=64, seed=0)


@pytest.fixture
def small_ctx():
    return ContextConfig(l_att=8, c=4, r=4)


@pytest.fixture
def small_weights(small_model):
    return init_weights(small_model, seed=7)


def rel_err(actual, expected):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected))) if expected.size else 0.0, 1e-12)
    return float(np.max(np.abs(actual - expected))) / scale if actual.size else 0.0
