"""Censoring-aware evaluation metrics.

``c_index``, ``auc_roc`` and ``average_precision`` are exact sort-based
implementations; the tests hold them against quadratic brute-force versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata

from .data import EventRecord


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (no comparable pairs, one class...)."""


@dataclass(frozen=True)
class ScoredSubject:
    patient_id: str
    risk: float
    t: int
    c: int


class WindowLabel(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    EXCLUDED = "excluded"


def window_label(ev: EventRecord, window: int) -> WindowLabel:
    """Observed inside the window -> positive; anything past it -> negative;
    censored inside it -> excluded (the outcome is unknown)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if ev.t > window:
        return WindowLabel.NEGATIVE
    return WindowLabel.POSITIVE if ev.c == 0 else WindowLabel.EXCLUDED


def c_index(subjects: list[ScoredSubject]) -> float:
    """Harrell's concordance with ties in risk counted as one half.

    A pair (i, j) is comparable when ``t_i < t_j`` and subject i had the event.
    """
    if not subjects:
        raise UndefinedMetricError("no subjects")
    t = np.array([s.t for s in subjects], dtype=float)
    c = np.array([s.c for s in subjects])
    r = np.array([s.risk for s in subjects], dtype=float)
    order = np.argsort(t, kind="stable")
    t, c, r = t[order], c[order], r[order]
    n = len(t)
    # Subjects with t > t_k occupy the sorted tail starting after t_k's tie block.
    uniq_t, first = np.unique(t, return_index=True)
    tail_start = dict(zip(uniq_t, np.r_[first[1:], n]))
    tails: dict[float, np.ndarray] = {}
    concordant = 0.0
    comparable = 0
    for k in range(n):
        if c[k] != 0:
            continue
        start = tail_start[t[k]]
        if start >= n:
            continue
        tail = tails.get(t[k])
        if tail is None:
            tail = tails[t[k]] = np.sort(r[start:])
        lo = np.searchsorted(tail, r[k], side="left")
        hi = np.searchsorted(tail, r[k], side="right")
        concordant += lo + 0.5 * (hi - lo)
        comparable += tail.size
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return concordant / comparable


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(int)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("need at least one positive and one negative")
    return s, y


def auc_roc(scores, labels) -> float:
    """Mann-Whitney statistic with mid-ranks for ties."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of precision times recall increment, thresholding at each distinct score.

    Terms are accumulated with ``math.fsum`` so the result does not depend on
    summation order.
    """
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    k = last_of_group + 1
    precision = tp / k
    recall_step = np.diff(np.r_[0, tp]) / y.sum()
    return math.fsum((precision * recall_step).tolist())


def trajectory_correlation(a, b) -> float:
    """Lag-0 Pearson correlation between two hazard sequences."""
    x = np.asarray(getattr(a, "hazards", a), dtype=float)
    y = np.asarray(getattr(b, "hazards", b), dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("trajectories must have equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(xc, xc)), np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise UndefinedMetricError("zero-variance trajectory")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))
