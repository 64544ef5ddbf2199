"""Shared fixtures: tiny configurations that keep tests fast while still
exercising every code path."""
import numpy as np
import pytest

from pointar.model import ModelConfig
from pointar.sequencer import SequencerConfig


def make_cloud(rng: np.random.Generator, m: int = 64) -> np.ndarray:
    return rng.normal(size=(m, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_seq_cfg():
    return SequencerConfig(num_points=64, num_patches=6, points_per_patch=8, channels=24)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        channels=24,
        heads=4,
        extractor_depth=2,
        generator_depth=1,
        points_per_patch=8,
        num_classes=5,
    )
