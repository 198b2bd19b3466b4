import numpy as np
import pytest

from cilforge.datagen import Clip
from cilforge.nn_core import ModelState

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_model(dim, num_classes=None):
    """Linear extractor equal to the identity on (dim, 1, 1) frames."""
    num_classes = num_classes or dim
    params = {
        "w1": np.eye(dim),
        "b1": np.zeros(dim),
        "head_w": np.eye(dim, num_classes),
        "head_b": np.zeros(num_classes),
    }
    return ModelState((dim, 1, 1), dim, 0, params)


def scalar_clip(values, label=0):
    """Clip of 1x1x1 frames holding the given scalars."""
    return Clip(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1), label)
