"""Figures rendered next to the CSV reports: ROC curves, AUC comparison
bars and red-team scores against daily percentile bands."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import RocCurve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _figure(width=4.5, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return plt.subplots(figsize=(width, height or width * golden))


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, RocCurve], path, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for label, curve in curves.items():
            ax.step(curve.fpr, curve.tpr, where="post", lw=1.2, label=f"{label} (AUC {curve.area():.3f})")
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        return _save(fig, path)


def plot_auc_bars(table: Mapping[str, Mapping[str, float]], columns: Sequence[str], path) -> Path:
    """Grouped bars: one group per row label (model), one bar per column."""
    rows = list(table)
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=max(4.5, 0.6 * len(rows) + 2))
        width = 0.8 / len(columns)
        x = np.arange(len(rows))
        for k, col in enumerate(columns):
            vals = [table[r].get(col, np.nan) for r in rows]
            ax.bar(x + (k - (len(columns) - 1) / 2) * width, vals, width, label=col)
        ax.set_xticks(x)
        ax.set_xticklabels(rows, rotation=30, ha="right")
        ax.set_ylabel("AUC")
        ax.set_ylim(0.4, 1.0)
        ax.legend(frameon=False, ncol=len(columns))
        return _save(fig, path)


def plot_percentile_bands(days: np.ndarray, scores: np.ndarray, positive: np.ndarray, path,
                          bands=(50, 90, 95, 99)) -> Path:
    """Daily score percentiles as lines, positives overlaid as crosses."""
    days = np.asarray(days)
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    uniq = np.unique(days)
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=6)
        for q in bands:
            ax.plot(uniq, [np.percentile(scores[days == d], q) for d in uniq], lw=1, label=f"{q}th pct")
        ax.scatter(days[positive], scores[positive], marker="x", color="purple", s=18, label="red team", zorder=3)
        ax.set_xlabel("day")
        ax.set_ylabel("anomaly score")
        ax.legend(frameon=False, ncol=3)
        return _save(fig, path)
