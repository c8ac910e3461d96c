"""
Cache for extracted training patches
"""

import logging
import threading
from collections import OrderedDict
from typing import Any, Dict, Hashable, Optional, Tuple

import numpy as np

from hsi_rcnet.data.hypercube import HyperCube, extract_batch

logger = logging.getLogger(__name__)

PixelKey = Tuple[int, int]


class LRUCache:
    """Least Recently Used cache"""

    def __init__(self, max_size: int = 1000):
        """
        Initialize LRU cache

        Args:
            max_size: Maximum number of items to cache
        """
        if max_size < 1:
            raise ValueError(f"max_size must be >= 1, got {max_size}")
        self.max_size = max_size
        self._cache: "OrderedDict[Hashable, Any]" = OrderedDict()

    def get(self, key: Hashable) -> Optional[Any]:
        """Get item from cache"""
        if key not in self._cache:
            return None

        # Move to end (most recently used)
        self._cache.move_to_end(key)
        return self._cache[key]

    def set(self, key: Hashable, value: Any):
        """Set item in cache"""
        if key in self._cache:
            self._cache[key] = value
            self._cache.move_to_end(key)
        else:
            if len(self._cache) >= self.max_size:
                # Remove least recently used
                self._cache.popitem(last=False)

            self._cache[key] = value

    def __contains__(self, key: Hashable) -> bool:
        return key in self._cache

    def clear(self):
        """Clear cache"""
        self._cache.clear()

    def size(self) -> int:
        """Get current cache size"""
        return len(self._cache)


class PatchCache:
    """
    Patches of one scene keyed by centre pixel

    Misses in a request are extracted together in one vectorised call.
    """

    def __init__(self, cube: HyperCube, patch_size: int, max_size: int = 4096):
        self.cube = cube
        self.patch_size = patch_size
        self._cache = LRUCache(max_size)
        self._lock = threading.Lock()
        self._hits = 0
        self._misses = 0

    def get_batch(self, indices: np.ndarray) -> np.ndarray:
        """
        Patches for [n, 2] (row, col) centres

        Returns:
            float array [n, s, s, S]
        """
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        keys = [(int(r), int(c)) for r, c in indices]
        with self._lock:
            # one lookup per distinct centre
            found = {k: self._cache.get(k) for k in OrderedDict.fromkeys(keys)}
            missing = [k for k, v in found.items() if v is None]
            self._misses += len(missing)
            self._hits += len(found) - len(missing)
            if missing:
                extracted = extract_batch(self.cube, np.array(missing), self.patch_size)
                for key, patch in zip(missing, extracted):
                    self._cache.set(key, patch)
                    found[key] = patch
        return np.stack([found[k] for k in keys])

    def clear(self):
        with self._lock:
            self._cache.clear()
            self._hits = self._misses = 0

    def get_statistics(self) -> Dict[str, Any]:
        """Get cache statistics"""
        requests = self._hits + self._misses
        return {
            "size": self._cache.size(),
            "max_size": self._cache.max_size,
            "hits": self._hits,
            "misses": self._misses,
            "hit_rate": self._hits / requests if requests else 0.0,
        }
