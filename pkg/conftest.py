"""Shared fixtures for the test suite"""

import numpy as np
import pytest

from config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """Small enough to train a handful of steps in a few seconds"""
    return RunConfig(
        seed=3,
        steps=4,
        checkpoint_every=2,
        eval_every=4,
        channels=4,
        stem_channels=2,
        image_size=64,
        train_scenes=2,
        k_segments=8,
        min_size=20,
        eval_scenes=2,
        eval_repeats=1,
        out_dir=str(tmp_path / "run"),
    ).validate()
