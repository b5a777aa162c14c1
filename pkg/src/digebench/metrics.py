"""Classification and segmentation metrics plus percentile-bootstrap statistics.

All metrics are defined on explicit counts (confusion matrices, rank sums,
mask overlaps) so every value has a direct counting interpretation. The
bootstrap is percentile-based with a redraw policy for resamples on which a
metric is undefined (for example a single-class resample for AUROC).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import RngStream


class UndefinedMetricError(ValueError):
    """The metric is undefined on this input (e.g. single-class labels)."""


class BootstrapError(RuntimeError):
    """Too many undefined resamples; the redraw cap was exceeded."""


@dataclass
class ConfusionMatrix:
    """Counts indexed [true class, predicted class]."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion matrix counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_labels(cls, true_labels: Sequence[int], pred_labels: Sequence[int],
                    n_classes: Optional[int] = None) -> "ConfusionMatrix":
        true_arr = np.asarray(true_labels, dtype=np.int64)
        pred_arr = np.asarray(pred_labels, dtype=np.int64)
        if true_arr.shape != pred_arr.shape or true_arr.ndim != 1:
            raise ValueError("labels and predictions must be 1-D and equal length")
        if true_arr.size == 0:
            raise ValueError("empty input")
        if np.any(true_arr < 0) or np.any(pred_arr < 0):
            raise ValueError("labels must be non-negative")
        if n_classes is None:
            n_classes = int(max(true_arr.max(), pred_arr.max())) + 1
        if np.any(true_arr >= n_classes) or np.any(pred_arr >= n_classes):
            raise ValueError(f"labels exceed n_classes={n_classes}")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (true_arr, pred_arr), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall; true classes with zero support are excluded with a warning."""
    support = cm.counts.sum(axis=1)
    present = support > 0
    if not np.any(present):
        raise UndefinedMetricError("no samples in any class")
    if not np.all(present):
        empty = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {empty} have no true samples; excluded from balanced accuracy")
    recalls = np.diag(cm.counts)[present] / support[present]
    return float(recalls.mean())


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1; F1 = 0 when precision + recall = 0."""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("empty confusion matrix")
    support = cm.counts.sum(axis=1)
    predicted = cm.counts.sum(axis=0)
    tp = np.diag(cm.counts)
    f1 = np.zeros(cm.n_classes)
    denom = support + predicted  # = (TP+FN) + (TP+FP); F1 = 2TP / denom
    nonzero = denom > 0
    f1[nonzero] = 2.0 * tp[nonzero] / denom[nonzero]
    return float((support / total) @ f1)


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks averaged within tie groups, 1-based."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    n = values.size
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    return ranks


def _binary_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc(scores, labels) -> float:
    """Rank-based AUROC: P(score_pos > score_neg) + 0.5 * P(tie).

    1-D scores with binary labels give the two-class value; an (n, C) score
    matrix with integer labels gives the unweighted mean of one-vs-rest
    AUROCs over classes present in the labels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size != scores.shape[0]:
        raise ValueError("labels must be 1-D with one entry per score row")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if scores.ndim == 1:
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("binary AUROC requires labels in {0, 1}")
        return _binary_auroc(scores, labels)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 1-D or 2-D, got ndim={scores.ndim}")
    present = np.unique(labels)
    if present.size < 2:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    if present.min() < 0 or present.max() >= scores.shape[1]:
        raise ValueError("labels exceed score matrix width")
    per_class = [_binary_auroc(scores[:, c], (labels == c).astype(np.int64))
                 for c in present]
    return float(np.mean(per_class))


def sensitivity_specificity(labels, flags) -> Tuple[float, float]:
    """(TP/(TP+FN), TN/(TN+FP)) for binary labels and flags."""
    labels = np.asarray(labels, dtype=np.int64)
    flags = np.asarray(flags, dtype=np.int64)
    if labels.shape != flags.shape or labels.ndim != 1:
        raise ValueError("labels and flags must be 1-D and equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("need at least one positive and one negative label")
    tp = int(((labels == 1) & (flags == 1)).sum())
    tn = int(((labels == 0) & (flags == 0)).sum())
    return tp / n_pos, tn / n_neg


def _check_masks(pred_mask, true_mask, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred_mask, dtype=np.int64)
    true = np.asarray(true_mask, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    for name, mask in (("pred", pred), ("true", true)):
        if np.any(mask < 0) or np.any(mask >= n_classes):
            raise ValueError(f"{name} mask labels must lie in [0, {n_classes})")
    return pred, true


def mean_dice(pred_mask, true_mask, n_classes: int) -> float:
    """Macro Dice: mean over classes of 2|P∩T|/(|P|+|T|); absent-in-both classes score 1."""
    pred, true = _check_masks(pred_mask, true_mask, n_classes)
    scores = []
    for c in range(n_classes):
        p = pred == c
        t = true == c
        denom = int(p.sum()) + int(t.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
    return float(np.mean(scores))


def mean_iou(pred_mask, true_mask, n_classes: int) -> float:
    """Macro IoU: mean over classes of |P∩T|/|P∪T|; absent-in-both classes score 1."""
    pred, true = _check_masks(pred_mask, true_mask, n_classes)
    scores = []
    for c in range(n_classes):
        p = pred == c
        t = true == c
        union = int((p | t).sum())
        scores.append(1.0 if union == 0 else int((p & t).sum()) / union)
    return float(np.mean(scores))


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    replicates: int
    alpha: float


def bootstrap_ci(metric: Callable[[np.ndarray], float], n_samples: int,
                 replicates: int = 1000, alpha: float = 0.05,
                 seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap CI for a metric evaluated on index subsets.

    `metric` receives an index array into the underlying sample and returns a
    scalar; the point estimate uses the identity indices. Resamples on which
    the metric raises UndefinedMetricError are redrawn from the same derived
    stream; total draws are capped at 10x the replicate count. Replicates use
    one derived stream each, so parallel evaluation is serial-identical.
    """
    if n_samples < 2:
        raise ValueError(f"need n_samples >= 2, got {n_samples}")
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    point = float(metric(np.arange(n_samples)))
    root = RngStream(seed)
    values = np.empty(replicates)
    draws_left = 10 * replicates
    for b in range(replicates):
        stream = root.substream(b)
        while True:
            if draws_left == 0:
                raise BootstrapError(
                    f"exceeded {10 * replicates} resampling draws; "
                    "metric undefined on too many resamples"
                )
            draws_left -= 1
            idx = stream.integers(0, n_samples, size=n_samples)
            try:
                values[b] = float(metric(idx))
                break
            except UndefinedMetricError:
                continue
    lower, upper = np.percentile(values, [100.0 * alpha / 2.0, 100.0 * (1.0 - alpha / 2.0)])
    return BootstrapCI(point=point, lower=float(lower), upper=float(upper),
                       replicates=replicates, alpha=alpha)
