"""Classification metrics over per-class probability scores."""

import numpy as np

from .errors import MetricUndefinedError, ShapeError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError(f"metrics: scores {scores.shape} vs labels {labels.shape}")
    return scores, labels


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of entries whose thresholded score equals the label."""
    scores, labels = _check(scores, labels)
    if scores.size == 0:
        raise MetricUndefinedError("accuracy of an empty batch")
    return float(np.mean((scores >= threshold) == (labels >= 0.5)))


def average_precision(scores, labels) -> float:
    """AP for one class: precision summed at each positive's rank, over positives.

    Ranking is by descending score with ties broken by lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average precision with no positives")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1.0:
            hits += 1
            total += hits / rank
    return total / n_pos


def mean_average_precision(scores, labels) -> float:
    """Mean AP over classes that have at least one positive; (M, K) inputs.

    Classes without positives are excluded from the mean; if every class is
    excluded the metric is undefined.
    """
    scores, labels = _check(scores, labels)
    aps = []
    for k in range(scores.shape[1]):
        if labels[:, k].sum() > 0:
            aps.append(average_precision(scores[:, k], labels[:, k]))
    if not aps:
        raise MetricUndefinedError("mean average precision with no positive class")
    return float(np.mean(aps))
