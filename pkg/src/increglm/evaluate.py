"""Ranking metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError, SingleClassError, ValidationError

__all__ = ["auc"]


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic.

    Equals the probability that a uniformly random positive outscores a
    uniformly random negative, with ties counted one half; computed
    from average ranks, so it is exact (no trapezoid discretization)
    and invariant under strictly increasing score transforms.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ShapeError("scores and labels must be 1-d arrays of equal length")
    if np.any((labels != 0) & (labels != 1)):
        raise ValidationError("labels must be binary")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC requires at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
