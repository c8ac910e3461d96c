"""
Exception hierarchy for the relational convolution network toolkit

Every error carries a stable ``kind`` identifier; the command line reports it
in its JSON diagnostics.
"""

from typing import Any, Dict, Optional


class RCNetError(Exception):
    """Base class for all errors raised by hsi_rcnet"""

    kind = "rcnet_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable diagnostic record"""
        return {"error": self.kind, "message": self.message, "details": self.details}


class ShapeError(RCNetError, ValueError):
    kind = "shape_error"


class NumericError(RCNetError, ArithmeticError):
    kind = "numeric_error"


class TapeError(RCNetError):
    kind = "tape_error"


class HSIFormatError(RCNetError, ValueError):
    kind = "hsi_format_error"


class MalformedHeaderError(HSIFormatError):
    kind = "malformed_header"


class SizeMismatchError(HSIFormatError):
    kind = "size_mismatch"


class LabelRangeError(HSIFormatError):
    kind = "label_range"


class DimensionMismatchError(HSIFormatError):
    kind = "dimension_mismatch"


class PatchError(RCNetError, ValueError):
    kind = "patch_error"


class SplitError(RCNetError, ValueError):
    kind = "split_error"


class ConfigError(RCNetError, ValueError):
    kind = "config_error"


class ConfigMismatchError(ConfigError):
    kind = "config_mismatch"


class CheckpointError(RCNetError, ValueError):
    kind = "checkpoint_error"


class TrainingDivergedError(NumericError):
    kind = "training_diverged"


class MetricsError(RCNetError, ValueError):
    kind = "metrics_error"


class UndefinedKappaError(MetricsError):
    kind = "undefined_kappa"


class UnknownLayerError(RCNetError, LookupError):
    kind = "unknown_layer"


class UsageError(RCNetError, ValueError):
    """Unknown flag, missing argument or bad value on the command line"""

    kind = "usage_error"
