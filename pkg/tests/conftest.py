import os

import numpy as np
import pytest

os.environ.setdefault("PANDENSE_PROGRESS", "0")

from geometry import PointAnnotation  # noqa: E402
from padnet_model import ModelSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """Smallest PaDNet-2 that still has every component."""
    return ModelSpec(N=2, channel_scale=0.0625, fen_channels=[4, 4])


@pytest.fixture
def square_corners():
    return PointAnnotation(width=4, height=4, points=[[0, 0], [1, 0], [0, 1], [1, 1]])
