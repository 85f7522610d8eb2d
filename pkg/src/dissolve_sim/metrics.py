"""Evaluation quantities: accuracy, micro-averaged F1, retain and forget rates.

Retain rate is measured on held-out successor data, forget rate on held-out
complement data; both are "higher is better". Multiclass datasets use
accuracy (forget = 1 - accuracy of predicting the true, forgotten class);
multilabel datasets use micro-F1 restricted to the relevant label group
(forget = 1 - F1 over the forgotten group).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .consent import Dataset, feature_matrix, labels_array
from .errors import ConfigurationError, MetricUndefinedError
from .nn import ModelCheckpoint, SoftmaxCrossEntropy, predict


def accuracy(predicted: Sequence[int] | np.ndarray, true: Sequence[int] | np.ndarray) -> float:
    """Fraction of exact matches."""
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ConfigurationError(f"shape mismatch {predicted.shape} vs {true.shape}")
    if predicted.size == 0:
        raise MetricUndefinedError("accuracy is undefined on an empty set")
    return float((predicted == true).mean())


def micro_f1(
    predicted: np.ndarray, true: np.ndarray, label_subset: Sequence[int]
) -> float:
    """Micro-averaged F1 over the given label columns.

    Counts are pooled across all samples and subset labels:
    F1 = 2*TP / (2*TP + FP + FN). When nothing is true and nothing is
    predicted in the subset (TP = FP = FN = 0), returns 1.0 so a model with
    nothing to forget scores forget rate 0.
    """
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape or predicted.ndim != 2:
        raise ConfigurationError(
            f"expected matching (N, L) label matrices, got {predicted.shape} vs {true.shape}"
        )
    if predicted.shape[0] == 0:
        raise MetricUndefinedError("micro F1 is undefined on an empty set")
    subset = tuple(label_subset)
    if not subset:
        raise ConfigurationError("label_subset must be non-empty")
    if len(set(subset)) != len(subset):
        raise ConfigurationError("label_subset contains duplicates")
    if min(subset) < 0 or max(subset) >= predicted.shape[1]:
        raise ConfigurationError(f"label_subset out of range for {predicted.shape[1]} labels")
    pred = predicted[:, subset].astype(bool)
    gold = true[:, subset].astype(bool)
    tp = int(np.logical_and(pred, gold).sum())
    fp = int(np.logical_and(pred, ~gold).sum())
    fn = int(np.logical_and(~pred, gold).sum())
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _rate(
    checkpoint: ModelCheckpoint, dataset: Dataset, label_subset: Sequence[int] | None
) -> float:
    if len(dataset.records) == 0:
        raise MetricUndefinedError("evaluation set is empty")
    predictions = predict(checkpoint, feature_matrix(dataset))
    truth = labels_array(dataset)
    if isinstance(checkpoint.architecture.head, SoftmaxCrossEntropy):
        return accuracy(predictions, truth)
    if label_subset is None:
        raise ConfigurationError("multilabel rates need an explicit label_subset")
    return micro_f1(predictions, truth, label_subset)


def retain_rate(
    checkpoint: ModelCheckpoint, cdc_test: Dataset, label_subset: Sequence[int] | None = None
) -> float:
    """Accuracy (multiclass) or micro-F1 over the consented label group
    (multilabel) on held-out successor data."""
    return _rate(checkpoint, cdc_test, label_subset)


def forget_rate(
    checkpoint: ModelCheckpoint, complement_test: Dataset, label_subset: Sequence[int] | None = None
) -> float:
    """One minus accuracy (multiclass) or one minus micro-F1 over the
    forgotten label group (multilabel) on held-out complement data."""
    return 1.0 - _rate(checkpoint, complement_test, label_subset)


@dataclass(frozen=True)
class MetricRow:
    """One regime's final evaluation, with the supporting set sizes."""

    regime: str
    forget_rate: float
    retain_rate: float
    n_forget_eval: int
    n_retain_eval: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.forget_rate <= 1.0 or not 0.0 <= self.retain_rate <= 1.0:
            raise ConfigurationError("rates must lie in [0, 1]")
        if self.n_forget_eval < 1 or self.n_retain_eval < 1:
            raise ConfigurationError("supporting counts must be positive for reported rates")
