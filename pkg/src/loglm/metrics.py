"""AUC, average percentile, ROC curves and recall at an analyst budget.

Ties use the midrank convention throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledScore:
    score: float
    positive: bool
    day: int = 0


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[k] produced point k+1; point 0 is (0, 0)

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _arrays(scores, labels=None):
    if labels is None:
        items = list(scores)
        s = np.array([x.score for x in items], dtype=np.float64)
        y = np.array([x.positive for x in items], dtype=bool)
        return s, y
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)


def _check(s, y):
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    return n_pos, len(y) - n_pos


def auc(scores, labels=None) -> float:
    """P(score_pos > score_neg) + P(tie) / 2 via the Mann-Whitney rank sum."""
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _check(s, y)
    ranks = rankdata(s)  # midranks, exact half-integers
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels=None) -> RocCurve:
    """Sweep thresholds over distinct scores, from highest to lowest."""
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _check(s, y)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocCurve(fpr, tpr, s[last_of_run])


def day_percentiles(scores: Sequence[float], days: Sequence[int]) -> np.ndarray:
    """Midrank percentile of each score among all scores of its day, in [0, 100]."""
    s = np.asarray(scores, dtype=np.float64)
    d = np.asarray(days)
    out = np.empty(len(s))
    for day in np.unique(d):
        idx = np.flatnonzero(d == day)
        out[idx] = 100.0 * (rankdata(s[idx]) - 0.5) / len(idx)
    return out


def average_percentile(scores, labels=None, days=None) -> float:
    """Mean over positives of their within-day percentile.

    A positive's percentile is 100 * (strictly lower + ties / 2) / n, with
    ties counting the positive itself, so a unique day maximum scores
    100 (n - 1/2) / n and a lone score on its day scores 50.
    """
    if labels is None:
        items = list(scores)
        s = np.array([x.score for x in items], dtype=np.float64)
        y = np.array([x.positive for x in items], dtype=bool)
        d = np.array([x.day for x in items])
    else:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels, dtype=bool)
        d = np.zeros(len(s), dtype=np.int64) if days is None else np.asarray(days)
    if not y.any():
        raise UndefinedMetricError("average percentile needs at least one positive")
    return float(day_percentiles(s, d)[y].mean())


def recall_at_budget(scores, labels=None, budget: float = 0.05) -> float:
    """Fraction of positives among the top ``ceil(budget * n)`` scores.

    Ties at the cut are broken against positives.
    """
    if not 0.0 < budget <= 1.0:
        raise ValueError("budget must be in (0, 1]")
    s, y = _arrays(scores, labels)
    if not y.any():
        raise UndefinedMetricError("recall needs at least one positive")
    k = min(len(s), math.ceil(budget * len(s) - 1e-9))
    order = np.lexsort((y, -s))  # descending score, negatives first among ties
    return float(y[order[:k]].sum() / y.sum())


def budget_for_recall(scores, labels=None, recall: float = 1.0) -> float:
    """Smallest fraction of data flagged (pessimistic ties) reaching ``recall``."""
    s, y = _arrays(scores, labels)
    order = np.lexsort((y, -s))
    hits = np.cumsum(y[order])
    need = math.ceil(recall * y.sum() - 1e-9)
    return float((np.searchsorted(hits, need) + 1) / len(s))


def summarize(scores: Iterable[float], labels: Iterable[bool], days: Iterable[int], budgets=(0.01, 0.03, 0.05, 0.12)) -> dict:
    s = np.asarray(list(scores), dtype=np.float64)
    y = np.asarray(list(labels), dtype=bool)
    d = np.asarray(list(days))
    report = {"n": int(len(s)), "positives": int(y.sum()), "auc": auc(s, y), "ap": average_percentile(s, y, d)}
    for b in budgets:
        report[f"recall@{b:g}"] = recall_at_budget(s, y, b)
    report["budget@recall0.8"] = budget_for_recall(s, y, 0.8)
    report["budget@recall1.0"] = budget_for_recall(s, y, 1.0)
    return report
