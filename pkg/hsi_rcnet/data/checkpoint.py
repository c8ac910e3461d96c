"""
Tensor checkpoints and optimizer side-state

A checkpoint is a UTF-8 JSON header line listing ``{name, shape}`` in order,
followed by the tensors as little-endian float32 values concatenated in
header order. Optimizer moments are stored separately with msgpack.
"""

import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import msgpack
import numpy as np

from hsi_rcnet.core.tensor import Tensor
from hsi_rcnet.errors import CheckpointError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TensorLike = Union[np.ndarray, Tensor]


def _as_array(value: TensorLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(path: PathLike, tensors: Mapping[str, TensorLike]) -> None:
    """Write named tensors in mapping order"""
    header = [{"name": name, "shape": list(_as_array(t).shape)} for name, t in tensors.items()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for t in tensors.values():
            f.write(np.ascontiguousarray(_as_array(t), dtype="<f4").tobytes())
    logger.info(f"Wrote checkpoint {path} ({len(header)} tensors)")


def load_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    """
    Read a checkpoint

    Returns:
        Ordered mapping name -> float32 array
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header: {e}")
    if not isinstance(header, list) or not all(
        isinstance(e, dict) and "name" in e and "shape" in e for e in header
    ):
        raise CheckpointError(f"{path}: header must list {{name, shape}} entries")

    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in header]
    expected = 4 * sum(sizes)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}",
            {"expected": expected, "actual": len(payload)},
        )

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for entry, size in zip(header, sizes):
        values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        tensors[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
        offset += 4 * size
    logger.debug(f"Loaded checkpoint {path} ({len(tensors)} tensors)")
    return tensors


def _pack_arrays(arrays: Mapping[str, np.ndarray]) -> Dict[str, Any]:
    return {
        name: {"shape": list(a.shape), "data": np.ascontiguousarray(a, dtype="<f8").tobytes()}
        for name, a in arrays.items()
    }


def _unpack_arrays(packed: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    return {
        name: np.frombuffer(entry["data"], dtype="<f8").reshape(entry["shape"]).copy()
        for name, entry in packed.items()
    }


def save_side_state(path: PathLike, state: Mapping[str, Any]) -> None:
    """
    Persist optimizer state: scalars plus ``m``/``v`` array mappings

    Args:
        path: destination file
        state: dict with keys step, beta1, beta2, eps, epoch, m, v
    """
    record = {k: v for k, v in state.items() if k not in ("m", "v")}
    record["m"] = _pack_arrays(state.get("m", {}))
    record["v"] = _pack_arrays(state.get("v", {}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(msgpack.packb(record, use_bin_type=True))
    logger.debug(f"Wrote optimizer state {path} (step {record.get('step')})")


def load_side_state(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        record = msgpack.unpackb(path.read_bytes(), raw=False)
    except OSError as e:
        raise CheckpointError(f"cannot read optimizer state {path}: {e}")
    except (msgpack.exceptions.ExtraData, msgpack.exceptions.UnpackException, ValueError) as e:
        raise CheckpointError(f"{path}: malformed optimizer state: {e}")
    if not isinstance(record, dict) or "m" not in record or "v" not in record:
        raise CheckpointError(f"{path}: optimizer state must hold m and v")
    record["m"] = _unpack_arrays(record["m"])
    record["v"] = _unpack_arrays(record["v"])
    return record
