"""Shared fixtures.

The expensive session fixtures (trained tiny model, calibration grads,
compressed variants) are built once and shared by the acceptance tests
and the heavier integration tests; unit tests stick to fresh untrained
models.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from shrinklm.data import builtin_split
from shrinklm.evaluate import corpus_windows
from shrinklm.model import ModelConfig, TrainConfig, init_model, train
from shrinklm.pipeline import (
    CalibConfig, calib_sequences_from_batches, calibrate, calibration_batches,
)

TRAIN_STEPS = 2000


@pytest.fixture(scope="session")
def corpora():
    return SimpleNamespace(
        train=builtin_split("train"),
        calib=builtin_split("calib"),
        eval=builtin_split("eval"),
    )


@pytest.fixture(scope="session")
def trained(corpora):
    cfg = ModelConfig(seed=0)
    tc = TrainConfig(steps=TRAIN_STEPS, batch_size=8, seq_len=128, learning_rate=1.5e-3)
    model, losses = train(cfg, corpora.train, TRAIN_STEPS, tc)
    return SimpleNamespace(model=model, losses=losses, config=cfg, train_config=tc)


@pytest.fixture(scope="session")
def calibrated(trained, corpora):
    batches = calibration_batches(corpora.calib, CalibConfig())
    loss = calibrate(trained.model, batches)
    return SimpleNamespace(
        model=trained.model,
        batches=batches,
        sequences=calib_sequences_from_batches(batches),
        loss=loss,
    )


@pytest.fixture(scope="session")
def eval_windows(corpora):
    # window length matches the trained context: RoPE positions past it
    # are out-of-distribution and would drown compression effects in noise
    return corpus_windows(corpora.eval, 128, max_windows=64)


@pytest.fixture()
def small_model():
    return init_model(ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=96, seed=7))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
