"""
Training and evaluation: warm-up cosine schedule, AdamW, the epoch loop
"""

import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from hsi_rcnet.config import DEFAULTS
from hsi_rcnet.core.metrics import ConfusionMatrix
from hsi_rcnet.core.model import Network
from hsi_rcnet.core.ops import softmax_cross_entropy
from hsi_rcnet.core.tensor import Tape, Tensor, no_tape
from hsi_rcnet.data.cache import PatchCache
from hsi_rcnet.data.hypercube import HyperCube, extract_batch, labels_at
from hsi_rcnet.errors import (
    ConfigError,
    ConfigMismatchError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
)

logger = logging.getLogger(__name__)

ParamMap = Mapping[str, Tensor]


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 300
    base_lr: float = 5e-4
    weight_decay: float = 1e-5
    warmup_epochs: int = 30
    lr_floor: float = 5e-6
    seed: int = 0
    patch_size: int = 27
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.lr_floor < self.base_lr:
            raise ConfigError(f"lr_floor must lie in [0, base_lr), got {self.lr_floor}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd, got {self.patch_size}")

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "TrainConfig":
        merged = dict(DEFAULTS["train"])
        merged.update(settings or {})
        unknown = set(merged) - set(DEFAULTS["train"])
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        try:
            return cls(
                batch_size=int(merged["batch_size"]),
                epochs=int(merged["epochs"]),
                base_lr=float(merged["base_lr"]),
                weight_decay=float(merged["weight_decay"]),
                warmup_epochs=int(merged["warmup_epochs"]),
                lr_floor=float(merged["lr_floor"]),
                seed=int(merged["seed"]),
                patch_size=int(merged["patch_size"]),
                workers=int(merged["workers"]),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid train settings: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """
    Learning rate for an epoch

    Linear warm-up from 10% of base_lr, then cosine annealing to lr_floor.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (0.1 + 0.9 * epoch / cfg.warmup_epochs)
    t = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_floor + 0.5 * (cfg.base_lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "v": self.v,
            "step": self.step,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OptimizerState":
        return cls(
            m={k: np.asarray(a, dtype=np.float64) for k, a in data["m"].items()},
            v={k: np.asarray(a, dtype=np.float64) for k, a in data["v"].items()},
            step=int(data.get("step", 0)),
            beta1=float(data.get("beta1", 0.9)),
            beta2=float(data.get("beta2", 0.999)),
            eps=float(data.get("eps", 1e-8)),
        )


def adamw_step(
    params: ParamMap,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> OptimizerState:
    """
    One AdamW update applied in place to ``params``

    Decay is decoupled: param *= (1 - lr * weight_decay) before the adaptive
    step. Non-finite gradients abort the step before anything is modified.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {list(g.shape)} != parameter shape {list(p.shape)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", {"param": name})
        for moments in (state.m, state.v):
            if name in moments and moments[name].shape != p.shape:
                raise ShapeError(f"{name}: optimizer moments do not match the parameter shape")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros(p.shape)), dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        decayed = p.data.astype(np.float64) * (1.0 - lr * weight_decay)
        p.data[...] = decayed - lr * update
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    lr: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    log: List[EpochRecord]
    final_state: "OrderedDict[str, np.ndarray]"
    best_state: "OrderedDict[str, np.ndarray]"
    best_epoch: Optional[int]
    best_loss: float
    optimizer: OptimizerState
    cancelled: bool = False
    stats: Dict[str, Any] = field(default_factory=dict)


@dataclass
class _ShardResult:
    size: int
    loss: float
    correct: int
    grads: Dict[str, np.ndarray]


def _check_compatible(net: Network, cube: HyperCube) -> None:
    if cube.num_classes != net.cfg.num_classes:
        raise ConfigMismatchError(
            f"scene has {cube.num_classes} classes, network expects {net.cfg.num_classes}",
            {"scene": cube.num_classes, "network": net.cfg.num_classes},
        )
    if cube.bands != net.cfg.bands:
        raise ConfigMismatchError(
            f"scene has {cube.bands} bands, network expects {net.cfg.bands}",
            {"scene": cube.bands, "network": net.cfg.bands},
        )


class Trainer:
    """Runs the epoch loop for one network on one scene"""

    def __init__(
        self,
        net: Network,
        cube: HyperCube,
        train_indices: np.ndarray,
        cfg: TrainConfig,
        cache: Optional[PatchCache] = None,
    ):
        """
        Initialize trainer

        Args:
            net: network to optimise in place
            cube: standardised scene
            train_indices: [n, 2] (row, col) training pixels
            cfg: optimisation settings
            cache: optional patch cache for the scene
        """
        _check_compatible(net, cube)
        if cfg.patch_size != net.cfg.patch_size:
            raise ConfigMismatchError(
                f"train.patch_size {cfg.patch_size} != network patch size {net.cfg.patch_size}"
            )
        self.net = net
        self.cube = cube
        self.train_indices = np.asarray(train_indices, dtype=np.int64).reshape(-1, 2)
        if len(self.train_indices) == 0:
            raise ConfigError("no training pixels")
        self.labels = labels_at(cube, self.train_indices)
        if (self.labels == 0).any():
            raise ConfigError("training pixels must be labeled")
        self.cfg = cfg
        self.cache = cache

        # Progress tracking
        self._progress_callbacks: List[Callable[[Dict[str, Any]], None]] = []
        self._cancel_requested = False

    def add_progress_callback(self, callback: Callable[[Dict[str, Any]], None]):
        """Add callback for progress updates"""
        self._progress_callbacks.append(callback)

    def remove_progress_callback(self, callback: Callable[[Dict[str, Any]], None]):
        """Remove progress callback"""
        if callback in self._progress_callbacks:
            self._progress_callbacks.remove(callback)

    def request_cancel(self):
        """Stop after the current epoch"""
        self._cancel_requested = True

    def _report_progress(self, **kwargs):
        """Report progress to callbacks"""
        for callback in self._progress_callbacks:
            try:
                callback(kwargs)
            except Exception as e:
                logger.error(f"Progress callback error: {e}")

    def _patches(self, indices: np.ndarray) -> np.ndarray:
        if self.cache is not None:
            return self.cache.get_batch(indices)
        return extract_batch(self.cube, indices, self.cfg.patch_size)

    def epoch_order(self, epoch: int) -> np.ndarray:
        """Shuffle for one epoch, reproducible from (seed, epoch) alone"""
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train_indices))

    def _shard_step(self, params: ParamMap, patches: np.ndarray, labels: np.ndarray) -> _ShardResult:
        dtype = next(iter(params.values())).dtype
        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            logits = self.net.forward(Tensor(patches, dtype=dtype), params=params)
            loss = softmax_cross_entropy(logits, labels)
        value = loss.item()
        if math.isfinite(value):
            tape.backward(loss, list(params.values()))
        predicted = np.argmax(logits.data, axis=1) + 1
        return _ShardResult(
            size=len(labels),
            loss=value,
            correct=int((predicted == labels).sum()),
            grads={name: p.grad for name, p in params.items()},
        )

    def _batch_step(
        self, patches: np.ndarray, labels: np.ndarray, executor: Optional[ThreadPoolExecutor]
    ) -> Tuple[float, int, Dict[str, np.ndarray]]:
        if executor is None:
            r = self._shard_step(self.net.params, patches, labels)
            return r.loss, r.correct, r.grads

        shards = [s for s in np.array_split(np.arange(len(labels)), self.cfg.workers) if len(s)]
        results = list(
            executor.map(
                lambda s: self._shard_step(self.net.shadow_params(), patches[s], labels[s]),
                shards,
            )
        )
        total = len(labels)
        loss = sum(r.loss * r.size for r in results) / total
        if not math.isfinite(loss):
            return loss, 0, {}
        grads = {}
        for name in self.net.params:
            # Reduced in shard order
            acc = None
            for r in results:
                g = r.grads[name] * (r.size / total)
                acc = g if acc is None else acc + g
            grads[name] = acc
        return loss, sum(r.correct for r in results), grads

    def run(
        self,
        start_epoch: int = 0,
        optimizer_state: Optional[OptimizerState] = None,
        best_loss: float = math.inf,
    ) -> TrainResult:
        """
        Train from ``start_epoch`` to ``cfg.epochs``

        Args:
            start_epoch: first epoch to run (resume)
            optimizer_state: moments to continue from
            best_loss: best epoch loss seen before resuming

        Returns:
            Per-epoch log plus best-by-train-loss and final parameters
        """
        cfg = self.cfg
        if not 0 <= start_epoch <= cfg.epochs:
            raise ConfigError(f"start_epoch {start_epoch} outside 0..{cfg.epochs}")
        state = optimizer_state or OptimizerState()
        self._cancel_requested = False
        log: List[EpochRecord] = []
        best_state = self.net.state_dict()
        best_epoch: Optional[int] = None
        n = len(self.train_indices)
        start_time = time.time()

        logger.info(
            f"Training {self.net.param_count()} parameters on {n} pixels, "
            f"epochs {start_epoch}..{cfg.epochs - 1}, batch {cfg.batch_size}, workers {cfg.workers}"
        )
        if cfg.workers > 1:
            logger.info("Data-parallel mode: gradients are reduced across shards, results are not bitwise reproducible")

        executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
        try:
            for epoch in range(start_epoch, cfg.epochs):
                if self._cancel_requested:
                    logger.info("Training cancelled")
                    break
                lr = lr_at(cfg, epoch)
                order = self.epoch_order(epoch)
                loss_sum = 0.0
                correct = 0
                for b, start in enumerate(range(0, n, cfg.batch_size)):
                    batch = order[start : start + cfg.batch_size]
                    labels = self.labels[batch]
                    loss, hits, grads = self._batch_step(self._patches(self.train_indices[batch]), labels, executor)
                    if not math.isfinite(loss):
                        details = {"epoch": epoch, "batch": b, "loss": loss, "lr": lr}
                        logger.error(f"Training diverged: {details}")
                        raise TrainingDivergedError("non-finite training loss", details)
                    adamw_step(self.net.params, grads, state, lr, cfg.weight_decay)
                    loss_sum += loss * len(batch)
                    correct += hits
                    logger.debug(f"epoch {epoch} batch {b}: loss {loss:.6f}")

                record = EpochRecord(epoch=epoch, loss=loss_sum / n, train_acc=correct / n, lr=lr)
                log.append(record)
                if record.loss < best_loss:
                    best_loss = record.loss
                    best_epoch = epoch
                    best_state = self.net.state_dict()
                logger.info(
                    f"Epoch {epoch + 1}/{cfg.epochs}: loss {record.loss:.4f}, "
                    f"train acc {record.train_acc:.4f}, lr {lr:.3e}"
                )
                self._report_progress(
                    epoch=epoch,
                    epochs=cfg.epochs,
                    loss=record.loss,
                    train_acc=record.train_acc,
                    lr=lr,
                    status="epoch_end",
                )
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        stats = {
            "epochs_run": len(log),
            "total_time": time.time() - start_time,
            "train_pixels": n,
        }
        if self.cache is not None:
            stats["cache"] = self.cache.get_statistics()
        return TrainResult(
            log=log,
            final_state=self.net.state_dict(),
            best_state=best_state,
            best_epoch=best_epoch,
            best_loss=best_loss,
            optimizer=state,
            cancelled=self._cancel_requested,
            stats=stats,
        )


def train(
    net: Network,
    cube: HyperCube,
    train_indices: np.ndarray,
    cfg: TrainConfig,
    start_epoch: int = 0,
    optimizer_state: Optional[OptimizerState] = None,
    cache: Optional[PatchCache] = None,
) -> TrainResult:
    """Train ``net`` in place; see Trainer.run"""
    return Trainer(net, cube, train_indices, cfg, cache).run(start_epoch, optimizer_state)


def predict(
    net: Network,
    cube: HyperCube,
    indices: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Predicted class ids (1-based) for [n, 2] pixel centres"""
    _check_compatible(net, cube)
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
    predictions = np.zeros(len(indices), dtype=np.int64)
    with no_tape():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            patches = extract_batch(cube, chunk, net.cfg.patch_size)
            logits = net.forward(patches)
            predictions[start : start + len(chunk)] = np.argmax(logits.data, axis=1) + 1
    return predictions


def evaluate(
    net: Network,
    test_indices: np.ndarray,
    cube: HyperCube,
    batch_size: int = 256,
) -> ConfusionMatrix:
    """Confusion matrix of argmax predictions on the test pixels"""
    predicted = predict(net, cube, test_indices, batch_size)
    truth = labels_at(cube, test_indices)
    cm = ConfusionMatrix.from_predictions(truth, predicted, net.cfg.num_classes)
    logger.info(f"Evaluated {cm.total} test pixels")
    return cm
