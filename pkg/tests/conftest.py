"""
Pytest configuration and fixtures
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to sys.path for testing
project_dir = Path(__file__).parent.parent
sys.path.insert(0, str(project_dir))

from hsi_rcnet.core.model import NetworkConfig  # noqa: E402
from hsi_rcnet.core.tensor import Tensor  # noqa: E402
from hsi_rcnet.data.hypercube import HyperCube, standardize_bands, synthetic_scene  # noqa: E402


def mirror(i: int, n: int) -> int:
    """Reflect an out-of-range index back into 0..n-1 (edge not repeated)"""
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def tiny_network_config(**overrides) -> NetworkConfig:
    """Smallest network that still runs every layer kind"""
    settings = {
        "patch_size": 9,
        "bands": 8,
        "num_classes": 3,
        "stem_channels": 2,
        "stem_window": [3, 3, 3],
        "stem_stride": [1, 1, 1],
        "channels": [2, 2, 3, 3],
        "blocks": [["conv"], ["conv"], ["rc"], ["rc"]],
    }
    settings.update(overrides)
    return NetworkConfig.from_settings(settings)


def toy_network_config() -> NetworkConfig:
    """Reduced preset sized for the 9 x 9 x 16 toy patches"""
    return NetworkConfig.reduced(
        patch_size=9, bands=16, num_classes=3, channels=(8, 16, 32, 64), stem_channels=8
    )


@pytest.fixture
def small_cube():
    """4 x 4 x 3 scene with two classes and one unlabeled pixel"""
    radiance = np.arange(48, dtype=np.float64).reshape(4, 4, 3)
    labels = np.array(
        [
            [1, 1, 2, 2],
            [1, 1, 2, 2],
            [1, 2, 2, 0],
            [1, 1, 2, 2],
        ]
    )
    return HyperCube(radiance=Tensor(radiance), labels=labels, class_names=["a", "b"])


@pytest.fixture
def toy_scene():
    """Standardised separable 3-class scene, 144 labeled pixels per class"""
    return standardize_bands(synthetic_scene(num_classes=3, block=12, gap=4, bands=16, seed=0))


@pytest.fixture
def tiny_config():
    return tiny_network_config()


@pytest.fixture
def toy_config():
    return toy_network_config()
