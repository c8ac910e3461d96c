"""
Classification metrics derived from a confusion matrix

All ratios are computed with exact rational arithmetic and converted to float
at the end, so hand-worked matrices give exact answers.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from hsi_rcnet.errors import MetricsError, UndefinedKappaError

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes"""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricsError(f"confusion matrix must be square, got shape {list(counts.shape)}")
        if counts.size and (counts < 0).any():
            raise MetricsError("confusion matrix entries must be >= 0")
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise MetricsError("confusion matrix entries must be integers")
        self.counts = counts.astype(np.int64)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_predictions(cls, truth: Sequence[int], predicted: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        """Accumulate 1-based class ids"""
        cm = cls.zeros(num_classes)
        cm.update(truth, predicted)
        return cm

    def update(self, truth: Sequence[int], predicted: Sequence[int]) -> None:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
        if truth.shape != predicted.shape:
            raise MetricsError(f"{truth.size} true labels vs {predicted.size} predictions")
        k = self.num_classes
        for values in (truth, predicted):
            if values.size and (values.min() < 1 or values.max() > k):
                raise MetricsError(f"class ids must lie in 1..{k}")
        np.add.at(self.counts, (truth - 1, predicted - 1), 1)

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _row_sums(self) -> List[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    def _col_sums(self) -> List[int]:
        return [int(v) for v in self.counts.sum(axis=0)]

    def _trace(self) -> int:
        return int(np.trace(self.counts))


def _require_total(cm: ConfusionMatrix) -> int:
    total = cm.total
    if total <= 0:
        raise MetricsError("confusion matrix is empty")
    return total


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """trace / total"""
    return float(Fraction(cm._trace(), _require_total(cm)))


def per_class_accuracy(cm: ConfusionMatrix) -> List[Optional[float]]:
    """Recall per class; None for classes without true samples"""
    return [
        float(Fraction(int(cm.counts[k, k]), rows)) if rows else None
        for k, rows in enumerate(cm._row_sums())
    ]


def average_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes with at least one true sample"""
    _require_total(cm)
    rows = cm._row_sums()
    recalls = [Fraction(int(cm.counts[k, k]), n) for k, n in enumerate(rows) if n]
    empty = [k + 1 for k, n in enumerate(rows) if not n]
    if empty:
        logger.warning(f"Classes {empty} have no test samples; excluded from average accuracy")
    return float(sum(recalls, Fraction(0)) / len(recalls))


def kappa(cm: ConfusionMatrix) -> float:
    """
    Cohen's kappa (p_o - p_e) / (1 - p_e)

    Raises:
        UndefinedKappaError: chance agreement p_e equals 1
    """
    total = _require_total(cm)
    chance = sum(r * c for r, c in zip(cm._row_sums(), cm._col_sums()))
    denominator = total * total - chance
    if denominator == 0:
        raise UndefinedKappaError("kappa is undefined when chance agreement is 1")
    return float(Fraction(total * cm._trace() - chance, denominator))


def _percent(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(100.0 * value, 2)


def metrics_report(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """
    JSON-ready report with percentages rounded to 2 decimals

    Kappa is reported as null when undefined.
    """
    names = list(class_names) if class_names else [f"class_{k}" for k in range(1, cm.num_classes + 1)]
    if len(names) != cm.num_classes:
        raise MetricsError(f"{len(names)} class names for {cm.num_classes} classes")
    try:
        kappa_value: Optional[float] = kappa(cm)
    except UndefinedKappaError:
        logger.warning("Kappa undefined for this confusion matrix")
        kappa_value = None
    rows = cm._row_sums()
    return {
        "oa": _percent(overall_accuracy(cm)),
        "aa": _percent(average_accuracy(cm)),
        "kappa": _percent(kappa_value),
        "per_class": [
            {"class": k + 1, "name": names[k], "support": rows[k], "accuracy": _percent(acc)}
            for k, acc in enumerate(per_class_accuracy(cm))
        ],
        "total": cm.total,
        "confusion": cm.counts.tolist(),
    }
