import numpy as np
import pytest

from xmed.model import build_resnet_mini


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    """Smallest useful resnet: one stage, one block, 8x8 input."""
    return build_resnet_mini(stages=(1,), base_width=4, num_classes=2,
                             input_shape=(1, 8, 8), seed=7)
