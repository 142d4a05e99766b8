"""Evaluation metrics: balanced accuracy, macro F1, macro one-vs-rest AUC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAUC, MissingClass


@dataclass
class EvalBatch:
    """Predicted class probabilities (rows sum to 1) and integer labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2:
            raise ValueError("probs must be M x S")
        if self.labels.shape != (self.probs.shape[0],):
            raise ValueError("labels length must match probs rows")
        sums = self.probs.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("probability rows must sum to 1")
        s = self.probs.shape[1]
        if self.labels.min() < 0 or self.labels.max() >= s:
            raise ValueError("labels out of range")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def predictions(self) -> np.ndarray:
        # argmax breaks ties toward the lowest class id
        return self.probs.argmax(axis=1)


def balanced_accuracy(batch: EvalBatch) -> float:
    """Unweighted mean of per-class recall."""
    preds = batch.predictions()
    recalls = []
    for c in range(batch.n_classes):
        mask = batch.labels == c
        if not mask.any():
            raise MissingClass(c)
        recalls.append((preds[mask] == c).mean())
    return float(np.mean(recalls))


def macro_f1(batch: EvalBatch) -> float:
    """Unweighted mean of per-class F1; a class never predicted scores 0."""
    preds = batch.predictions()
    f1s = []
    for c in range(batch.n_classes):
        if not (batch.labels == c).any():
            raise MissingClass(c)
        tp = float(((preds == c) & (batch.labels == c)).sum())
        fp = float(((preds == c) & (batch.labels != c)).sum())
        fn = float(((preds != c) & (batch.labels == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return (starts + (counts + 1) / 2.0)[inverse]


def auc(batch: EvalBatch) -> float:
    """Macro one-vs-rest AUC via the rank statistic; ties contribute 1/2."""
    aucs = []
    for c in range(batch.n_classes):
        pos = batch.labels == c
        n_pos = int(pos.sum())
        n_neg = int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            raise DegenerateAUC(c)
        ranks = _average_ranks(batch.probs[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    return float(np.mean(aucs))
