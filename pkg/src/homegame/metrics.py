"""Ranking and classification metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class DegenerateLabelsError(ValueError):
    pass


def auc_roc(scores, labels) -> float:
    """Rank-based AUC: probability a random positive outranks a random
    negative, ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d arrays")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("AUC undefined: labels are all one class")
    ranks = rankdata(scores)  # average ranks on ties
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def precision_recall(predicted, actual) -> tuple[float, float]:
    """Precision/recall over parallel boolean event lists."""
    predicted = list(predicted)
    actual = list(actual)
    if len(predicted) != len(actual) or not predicted:
        raise ValueError("need equal-length non-empty event lists")
    tp = sum(1 for p, a in zip(predicted, actual) if p and a)
    fp = sum(1 for p, a in zip(predicted, actual) if p and not a)
    fn = sum(1 for p, a in zip(predicted, actual) if not p and a)
    precision = tp / (tp + fp) if (tp + fp) else 1.0
    recall = tp / (tp + fn) if (tp + fn) else 1.0
    return precision, recall
