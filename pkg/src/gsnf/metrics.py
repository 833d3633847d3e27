"""Ranking metrics for binary classification scores."""

from fractions import Fraction

import numpy as np

from .exceptions import UndefinedMetricError


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(bool)


def auroc(scores, labels):
    """Probability a positive outscores a negative, ties counted as one half."""
    scores, labels = _prepare(scores, labels)
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    # integer counts keep the result exact
    wins2 = int(2 * below.sum() + ties.sum())
    return wins2 / (2 * pos.size * neg.size)


def auprc(scores, labels):
    """Average precision, with equal scores grouped into a single threshold."""
    scores, labels = _prepare(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    d_tp = np.diff(np.r_[0, tp])
    # summed as exact rationals so the result is the correctly rounded value
    total = sum(Fraction(int(d) * int(t), int(t + f)) for d, t, f in zip(d_tp, tp, fp) if d)
    return float(total / n_pos)
