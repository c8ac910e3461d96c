"""
Hyperspectral scenes: HSICUBE storage, band standardisation, patch extraction
and per-class train/test splits
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from hsi_rcnet.core.ops import mirror_indices
from hsi_rcnet.core.tensor import Tensor
from hsi_rcnet.errors import (
    ConfigError,
    DimensionMismatchError,
    LabelRangeError,
    MalformedHeaderError,
    PatchError,
    SizeMismatchError,
    SplitError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER_FIELDS = ("h", "w", "s", "k", "class_names")


@dataclass
class HyperCube:
    """An H x W x S scene with its per-pixel class labels (0 = unlabeled)"""

    radiance: Tensor
    labels: np.ndarray
    class_names: List[str]

    def __post_init__(self):
        if len(self.radiance.shape) != 3:
            raise DimensionMismatchError(
                f"radiance must be [H, W, S], got {list(self.radiance.shape)}"
            )
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != self.radiance.shape[:2]:
            raise DimensionMismatchError(
                f"labels {list(self.labels.shape)} do not match scene "
                f"{list(self.radiance.shape[:2])}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise LabelRangeError(
                f"labels must lie in 0..{self.num_classes}, found "
                f"{int(self.labels.min())}..{int(self.labels.max())}"
            )

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    @property
    def width(self) -> int:
        return self.radiance.shape[1]

    @property
    def bands(self) -> int:
        return self.radiance.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> Dict[int, int]:
        """Labeled pixel count per class id"""
        counts = np.bincount(self.labels.reshape(-1), minlength=self.num_classes + 1)
        return {k: int(counts[k]) for k in range(1, self.num_classes + 1)}

    def labeled_pixels(self) -> np.ndarray:
        """[n, 2] (row, col) of every labeled pixel, row-major order"""
        rows, cols = np.nonzero(self.labels)
        return np.stack([rows, cols], axis=1)


@dataclass
class PatchSample:
    """An s x s x S cube centred on a labeled pixel"""

    cube: Tensor
    label: int
    center: Tuple[int, int]


# ---------------------------------------------------------------------------
# HSICUBE format
# ---------------------------------------------------------------------------


def save_hypercube(cube: HyperCube, path: PathLike) -> None:
    """Write a scene as JSON header line + float32 radiance + int16 labels"""
    header = {
        "h": cube.height,
        "w": cube.width,
        "s": cube.bands,
        "k": cube.num_classes,
        "class_names": list(cube.class_names),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(cube.radiance.data, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cube.labels, dtype="<i2").tobytes())
    logger.info(f"Wrote HSICUBE {path} ({cube.height}x{cube.width}x{cube.bands}, K={cube.num_classes})")


def _parse_header(line: bytes) -> Dict[str, Any]:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"header is not valid JSON: {e}")
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    missing = [k for k in _HEADER_FIELDS if k not in header]
    if missing:
        raise MalformedHeaderError(f"header is missing fields: {missing}")
    for key in ("h", "w", "s", "k"):
        if not isinstance(header[key], int) or header[key] < 1:
            raise MalformedHeaderError(f"header field {key!r} must be a positive integer")
    names = header["class_names"]
    if not isinstance(names, list) or len(names) != header["k"]:
        raise MalformedHeaderError(f"class_names must list exactly k={header['k']} names")
    return header


def load_hypercube(path: PathLike) -> HyperCube:
    """
    Read and validate an HSICUBE file

    Args:
        path: file written by save_hypercube or the ingest command

    Returns:
        Validated HyperCube
    """
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise MalformedHeaderError("header line is not newline-terminated")
        header = _parse_header(header_line)
        payload = f.read()

    h, w, s = header["h"], header["w"], header["s"]
    n_floats = h * w * s
    expected = n_floats * 4 + h * w * 2
    if len(payload) != expected:
        raise SizeMismatchError(
            f"payload has {len(payload)} bytes, header implies {expected}",
            {"expected": expected, "actual": len(payload)},
        )
    radiance = np.frombuffer(payload, dtype="<f4", count=n_floats).reshape(h, w, s)
    labels = np.frombuffer(payload, dtype="<i2", offset=n_floats * 4, count=h * w).reshape(h, w)
    cube = HyperCube(
        radiance=Tensor(radiance.astype(np.float32), dtype=np.float32),
        labels=labels.astype(np.int64),
        class_names=[str(n) for n in header["class_names"]],
    )
    logger.info(f"Loaded HSICUBE {path} ({h}x{w}x{s}, K={cube.num_classes})")
    return cube


def ingest_triplet(dims_path: PathLike, data_path: PathLike, labels_path: PathLike) -> HyperCube:
    """
    Build a scene from the plain-text triplet format

    The dims file holds ``H W S K`` on its first line, optionally followed by
    K class names (one per line). The data CSV has H*W rows of S values, the
    label CSV H rows of W integers.
    """
    lines = Path(dims_path).read_text(encoding="utf-8").splitlines()
    try:
        h, w, s, k = (int(v) for v in lines[0].split())
    except (IndexError, ValueError):
        raise MalformedHeaderError(f"{dims_path}: first line must be 'H W S K'")
    names = [ln.strip() for ln in lines[1:] if ln.strip()]
    if names and len(names) != k:
        raise DimensionMismatchError(f"dims file lists {len(names)} class names for K={k}")
    names = names or [f"class_{i}" for i in range(1, k + 1)]

    data = np.loadtxt(data_path, delimiter=",", dtype=np.float64, ndmin=2)
    if data.shape != (h * w, s):
        raise DimensionMismatchError(
            f"data CSV is {data.shape[0]}x{data.shape[1]}, expected {h * w}x{s}"
        )
    labels = np.loadtxt(labels_path, delimiter=",", dtype=np.int64, ndmin=2)
    if labels.shape != (h, w):
        raise DimensionMismatchError(
            f"label CSV is {labels.shape[0]}x{labels.shape[1]}, expected {h}x{w}"
        )
    return HyperCube(
        radiance=Tensor(data.reshape(h, w, s), dtype=np.float32),
        labels=labels,
        class_names=names,
    )


# ---------------------------------------------------------------------------
# Preprocessing and patches
# ---------------------------------------------------------------------------


def standardize_bands(cube: HyperCube) -> HyperCube:
    """Zero-mean, unit-std bands using statistics of the labeled pixels only"""
    data = cube.radiance.data.astype(np.float64)
    mask = cube.labels > 0
    samples = data[mask] if mask.any() else data.reshape(-1, cube.bands)
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    flat = std == 0
    if flat.any():
        logger.warning(f"{int(flat.sum())} zero-variance band(s) mapped to zeros")
    scaled = (data - mean) / np.where(flat, 1.0, std)
    scaled[..., flat] = 0.0
    return HyperCube(
        radiance=Tensor(scaled, dtype=np.float32),
        labels=cube.labels.copy(),
        class_names=list(cube.class_names),
    )


def _check_patch_size(s: int) -> None:
    if s < 1 or s % 2 == 0:
        raise PatchError(f"patch size must be a positive odd number, got {s}")


def extract_patch(cube: HyperCube, row: int, col: int, s: int) -> PatchSample:
    """Mirror-padded s x s x S window centred on a labeled pixel"""
    _check_patch_size(s)
    if not (0 <= row < cube.height and 0 <= col < cube.width):
        raise PatchError(f"pixel ({row}, {col}) lies outside the scene")
    label = int(cube.labels[row, col])
    if label == 0:
        raise PatchError(f"pixel ({row}, {col}) is unlabeled")
    patch = extract_batch(cube, np.array([[row, col]]), s)[0]
    return PatchSample(cube=Tensor(patch, dtype=np.float32), label=label, center=(row, col))


def extract_batch(cube: HyperCube, indices: np.ndarray, s: int) -> np.ndarray:
    """
    Vectorised patch extraction

    Args:
        cube: source scene
        indices: [n, 2] (row, col) centres
        s: odd patch size

    Returns:
        float array [n, s, s, S]
    """
    _check_patch_size(s)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    outside = (indices < 0).any(axis=1) | (indices[:, 0] >= cube.height) | (indices[:, 1] >= cube.width)
    if outside.any():
        first = int(np.argmax(outside))
        raise PatchError(
            f"{int(outside.sum())} centre(s) lie outside the {cube.height} x {cube.width} scene",
            {"index": first, "center": indices[first].tolist()},
        )
    r = s // 2
    row_index = mirror_indices(cube.height, r, r)
    col_index = mirror_indices(cube.width, r, r)
    offsets = np.arange(s)
    rows = row_index[indices[:, 0:1] + offsets]  # [n, s]
    cols = col_index[indices[:, 1:2] + offsets]
    return cube.radiance.data[rows[:, :, None], cols[:, None, :]]


def labels_at(cube: HyperCube, indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    return cube.labels[indices[:, 0], indices[:, 1]]


# ---------------------------------------------------------------------------
# Train/test split
# ---------------------------------------------------------------------------

# Class ids of the six small Indian Pines classes that get 10 training pixels
INDIAN_PINES_SMALL_CLASSES = (1, 4, 7, 9, 13, 16)

PROTOCOL_CLASSES = {
    "indian_pines": 16,
    "pavia_university": 9,
    "houston2013": 15,
}


@dataclass
class SplitSpec:
    """Training pixels drawn per class, and the seed that draws them"""

    per_class_train: Dict[int, int]
    seed: int = 0

    def __post_init__(self):
        self.per_class_train = {int(k): int(v) for k, v in self.per_class_train.items()}
        negative = {k: v for k, v in self.per_class_train.items() if v < 0}
        if negative:
            raise ConfigError(f"training counts must be >= 0: {negative}")

    @property
    def total(self) -> int:
        return sum(self.per_class_train.values())

    @classmethod
    def uniform(cls, num_classes: int, count: int, seed: int = 0) -> "SplitSpec":
        return cls({k: count for k in range(1, num_classes + 1)}, seed)

    @classmethod
    def benchmark_protocol(cls, dataset: str, seed: int = 0) -> "SplitSpec":
        """150 pixels per class; 10 for the six small Indian Pines classes"""
        if dataset not in PROTOCOL_CLASSES:
            raise ConfigError(
                f"unknown split protocol {dataset!r}; choose from {sorted(PROTOCOL_CLASSES)}"
            )
        counts = {k: 150 for k in range(1, PROTOCOL_CLASSES[dataset] + 1)}
        if dataset == "indian_pines":
            counts.update({k: 10 for k in INDIAN_PINES_SMALL_CLASSES})
        return cls(counts, seed)

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any], num_classes: int) -> "SplitSpec":
        protocol = settings.get("protocol", "uniform")
        seed = int(settings.get("seed", 0))
        if protocol == "uniform":
            spec = cls.uniform(num_classes, int(settings.get("train_per_class", 150)), seed)
        else:
            spec = cls.benchmark_protocol(protocol, seed)
        overrides = settings.get("overrides") or {}
        spec.per_class_train.update({int(k): int(v) for k, v in overrides.items()})
        return spec

    def validate(self, cube: HyperCube) -> None:
        counts = cube.class_counts()
        for k, n in self.per_class_train.items():
            if k not in counts:
                raise SplitError(f"class {k} does not exist (K={cube.num_classes})")
            if n > counts[k]:
                raise SplitError(
                    f"class {k} has {counts[k]} labeled pixels, {n} requested for training",
                    {"class": k, "available": counts[k], "requested": n},
                )


@dataclass
class Split:
    """Disjoint train/test pixel sets, each [n, 2] (row, col)"""

    train: np.ndarray
    test: np.ndarray
    train_counts: Dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "train": self.train.tolist(),
            "test": self.test.tolist(),
            "train_counts": {str(k): v for k, v in self.train_counts.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Split":
        return cls(
            train=np.asarray(data["train"], dtype=np.int64).reshape(-1, 2),
            test=np.asarray(data["test"], dtype=np.int64).reshape(-1, 2),
            train_counts={int(k): int(v) for k, v in data.get("train_counts", {}).items()},
        )


def split_train_test(cube: HyperCube, spec: SplitSpec) -> Split:
    """
    Draw training pixels per class without replacement; the rest is test

    Classes are visited in increasing id order with one generator seeded by
    ``spec.seed``, so identical specs give identical splits.
    """
    spec.validate(cube)
    rng = np.random.default_rng(spec.seed)
    flat_labels = cube.labels.reshape(-1)
    train_parts: List[np.ndarray] = []
    test_parts: List[np.ndarray] = []
    counts: Dict[int, int] = {}
    for k in range(1, cube.num_classes + 1):
        pixels = np.flatnonzero(flat_labels == k)
        n = spec.per_class_train.get(k, 0)
        chosen = np.sort(rng.choice(pixels, size=n, replace=False)) if n else pixels[:0]
        train_parts.append(chosen)
        test_parts.append(np.setdiff1d(pixels, chosen, assume_unique=True))
        counts[k] = int(n)

    def to_rc(parts: Sequence[np.ndarray]) -> np.ndarray:
        flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        return np.stack(np.unravel_index(flat, cube.labels.shape), axis=1).astype(np.int64)

    split = Split(train=to_rc(train_parts), test=to_rc(test_parts), train_counts=counts)
    logger.info(f"Split {len(split.train)} training / {len(split.test)} test pixels")
    return split


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def synthetic_scene(
    num_classes: int = 3,
    block: int = 10,
    gap: int = 4,
    bands: int = 16,
    separation: float = 3.0,
    noise: float = 1.0,
    seed: int = 0,
) -> HyperCube:
    """
    Separable toy scene: one block x block square per class, side by side

    Class k has spectral mean ``separation * noise * (k - 1)`` in every band;
    unlabeled gap columns sit at ``-separation * noise``. Gaussian noise with
    std ``noise`` is added everywhere.
    """
    if num_classes < 1 or block < 1 or gap < 0 or bands < 1:
        raise ConfigError("synthetic scene extents must be positive")
    rng = np.random.default_rng(seed)
    width = num_classes * block + (num_classes - 1) * gap
    labels = np.zeros((block, width), dtype=np.int64)
    means = np.full((block, width), -separation * noise)
    for k in range(1, num_classes + 1):
        start = (k - 1) * (block + gap)
        labels[:, start : start + block] = k
        means[:, start : start + block] = separation * noise * (k - 1)
    radiance = means[..., None] + rng.normal(0.0, noise, size=(block, width, bands))
    return HyperCube(
        radiance=Tensor(radiance, dtype=np.float32),
        labels=labels,
        class_names=[f"class_{k}" for k in range(1, num_classes + 1)],
    )
