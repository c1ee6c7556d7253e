"""Rank-based evaluation metrics for binary link prediction."""

from __future__ import annotations

import numpy as np


class MetricError(Exception):
    pass


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d and equal length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary")
    return scores, labels.astype(bool)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receiving the average of their rank range."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted half (rank-sum formulation)."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc requires both classes")
    ranks = _average_ranks(scores)
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall steps: sum over positives of
    precision@rank * delta-recall, descending score, stable tie order."""
    scores, pos = _check(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricError("average_precision requires at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    hits = 0
    total = 0.0
    for k, idx in enumerate(order, start=1):
        if pos[idx]:
            hits += 1
            total += hits / k
    return float(total / n_pos)


def precision_at_half(scores, labels) -> float:
    """Fraction of predictions >= 0.5 that are true positives."""
    scores, pos = _check(scores, labels)
    predicted = scores >= 0.5
    if not predicted.any():
        return 0.0
    return float((predicted & pos).sum() / predicted.sum())
