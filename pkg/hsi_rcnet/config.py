"""
Configuration management for hsi_rcnet
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from hsi_rcnet.errors import ConfigError

logger = logging.getLogger(__name__)

# Default configuration values
DEFAULTS: Dict[str, Any] = {
    "network": {
        "patch_size": 27,
        "bands": 200,
        "num_classes": 16,
        "stem_channels": 16,
        "stem_window": [3, 3, 7],
        "stem_stride": [1, 1, 2],
        "channels": [32, 64, 128, 256],
        "blocks": [["conv"], ["conv", "conv"], ["rc", "rc"], ["rc", "rc"]],
        "downsample": ["conv", "conv", "rc", "rc"],
        "kernel_sizes": [3, 3, 3, 3],
        "relconv": {
            "weighting": "channel",
            "heads": 1,
            "projections": True,
        },
    },
    "train": {
        "batch_size": 64,
        "epochs": 300,
        "base_lr": 5e-4,
        "weight_decay": 1e-5,
        "warmup_epochs": 30,
        "lr_floor": 5e-6,
        "seed": 0,
        "patch_size": 27,
        "workers": 1,
    },
    "split": {
        "protocol": "uniform",
        "train_per_class": 150,
        "seed": 0,
        "overrides": {},
    },
    "data": {
        "standardize": True,
    },
    "runtime": {
        "cache_enabled": True,
        "cache_size": 4096,
        "eval_batch_size": 256,
    },
    "logging": {
        "level": "INFO",
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    result = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = _merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


class RCNetConfig:
    """Configuration with dotted-key access, backed by an optional JSON file"""

    def __init__(self, values: Optional[Dict[str, Any]] = None, path: Optional[Union[str, Path]] = None):
        self._values = _merge(DEFAULTS, values or {})
        self.path = Path(path) if path else None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RCNetConfig":
        """Read a JSON file; missing keys fall back to DEFAULTS"""
        path = Path(path)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
        if not isinstance(values, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        logger.debug(f"Loaded configuration from {path}")
        return cls(values, path)

    def get(self, key: str, default: Any = None) -> Any:
        """Get config value with dot notation support"""
        value: Any = self._values
        for part in key.split("."):
            if not isinstance(value, dict) or part not in value:
                return default
            value = value[part]
        return copy.deepcopy(value)

    def set(self, key: str, value: Any) -> None:
        """Set config value with dot notation support"""
        parts = key.split(".")
        current = self._values
        for part in parts[:-1]:
            if not isinstance(current.get(part), dict):
                current[part] = {}
            current = current[part]
        current[parts[-1]] = value

    def as_dict(self) -> Dict[str, Any]:
        """Get configuration as dictionary"""
        return copy.deepcopy(self._values)

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Save configuration to disk"""
        target = Path(path) if path else self.path
        if target is None:
            raise ConfigError("no path to save the configuration to")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self._values, indent=2, sort_keys=True), encoding="utf-8")
        return target
