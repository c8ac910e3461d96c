"""
Scenes, checkpoints and patch caching
"""

from .cache import PatchCache
from .checkpoint import load_checkpoint, save_checkpoint
from .hypercube import HyperCube, load_hypercube, save_hypercube

__all__ = [
    "HyperCube",
    "load_hypercube",
    "save_hypercube",
    "load_checkpoint",
    "save_checkpoint",
    "PatchCache",
]
