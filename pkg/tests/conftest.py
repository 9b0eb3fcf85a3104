import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lexa", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("lexa")

LONG = os.environ.get("LEXA_LONG") == "1"


def pytest_collection_modifyitems(config, items):
    if LONG:
        return
    skip = pytest.mark.skip(reason="multi-hour experiment; set LEXA_LONG=1")
    for item in items:
        if "long" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_wm_config():
    from lexa.worldmodel import WorldModelConfig
    return WorldModelConfig(deter=12, stoch=6, embed=8, enc_hidden=24, dec_hidden=24, hidden=16)


@pytest.fixture
def tiny_train_config():
    """Training config small enough for second-scale runs."""
    from lexa.orchestrator import TrainConfig
    return TrainConfig(env="pointrooms", total_steps=1400, prefill=2, train_every=50, batch=4,
                       seq_len=8, deter=16, stoch=8, embed=8, ens_heads=3, ens_hidden=16,
                       policy_hidden=16, horizon=5, eval_every=400, eval_episodes=1,
                       checkpoint_every=500)
