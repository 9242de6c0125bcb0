"""Segmentation metrics: thresholded confusion counts, the standard point
metrics, and threshold-sweep summaries (maximum F-measure and 11-point
interpolated average precision)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# 255 evenly spaced levels matching 8-bit probability export.
DEFAULT_THRESHOLDS = np.arange(1, 256) / 256.0


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class PRCurve:
    """Threshold sweep, ordered by strictly decreasing threshold."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_score: np.ndarray


def confusion(p: np.ndarray, y: np.ndarray, tau: float) -> ConfusionCounts:
    """Counts with prediction = (p > tau)."""
    p, y = np.asarray(p), np.asarray(y)
    if p.shape != y.shape:
        raise ContractError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    if not 0.0 < tau < 1.0:
        raise ContractError(f"threshold must lie in (0,1), got {tau}")
    pred = p > tau
    pos = y == 1
    return ConfusionCounts(tp=int((pred & pos).sum()), fp=int((pred & ~pos).sum()),
                           tn=int((~pred & ~pos).sum()), fn=int((~pred & pos).sum()))


def _safe_div(num, den, when_empty=0.0):
    return num / den if den > 0 else when_empty


def point_metrics(c: ConfusionCounts) -> dict:
    """Acc/Pre/Rec/Fsc/IoU/FPR/FNR with explicit zero-division conventions:
    precision and recall fall back to 0, IoU to 1 on an empty union."""
    pre = _safe_div(c.tp, c.tp + c.fp)
    rec = _safe_div(c.tp, c.tp + c.fn)
    return {
        "Acc": _safe_div(c.tp + c.tn, c.total),
        "Pre": pre,
        "Rec": rec,
        "Fsc": _safe_div(2 * pre * rec, pre + rec),
        "IoU": _safe_div(c.tp, c.tp + c.fp + c.fn, when_empty=1.0),
        "FPR": _safe_div(c.fp, c.fp + c.tn),
        "FNR": _safe_div(c.fn, c.fn + c.tp),
    }


def score_histograms(p: np.ndarray, y: np.ndarray, n_bins: int = 256):
    """Per-class score histograms; an associative frame aggregate."""
    p, y = np.asarray(p), np.asarray(y)
    if p.shape != y.shape:
        raise ContractError(f"shape mismatch: p {p.shape} vs y {y.shape}")
    edges = np.arange(n_bins + 1) / n_bins
    pos = np.histogram(np.clip(p[y == 1], 0, 1), bins=edges)[0]
    neg = np.histogram(np.clip(p[y != 1], 0, 1), bins=edges)[0]
    return pos, neg


def curve_from_histograms(pos: np.ndarray, neg: np.ndarray) -> PRCurve:
    """Sweep the 255 inner bin edges as thresholds, descending.

    Bin i holds scores in (i/256, (i+1)/256]; prediction is p > tau, so
    counts above edge tau_i are exact suffix sums of the histograms.
    """
    n_bins = len(pos)
    # tp_at[i]: positives with score > i/256, for i = 255..1
    suffix_pos = np.cumsum(pos[::-1])[::-1]
    suffix_neg = np.cumsum(neg[::-1])[::-1]
    taus = np.arange(n_bins - 1, 0, -1) / n_bins
    tp = suffix_pos[n_bins - 1:0:-1].astype(float)
    fp = suffix_neg[n_bins - 1:0:-1].astype(float)
    n_pos = pos.sum()
    with np.errstate(invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        recall = tp / n_pos if n_pos > 0 else np.zeros_like(tp)
        f = np.where(precision + recall > 0,
                     2 * precision * recall / np.maximum(precision + recall, 1e-300), 0.0)
    return PRCurve(taus, precision, recall, f)


def average_precision(curve: PRCurve) -> float:
    """11-point interpolated AP: mean of max precision at recall >= r."""
    levels = np.linspace(0.0, 1.0, 11)
    ap = 0.0
    for r in levels:
        mask = curve.recall >= r - 1e-12
        ap += curve.precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def curve_metrics(p: np.ndarray, y: np.ndarray, thresholds=None):
    """(MaxF, AP, PRCurve) over a threshold grid (default 255 levels)."""
    if thresholds is None:
        pos, neg = score_histograms(p, y)
        curve = curve_from_histograms(pos, neg)
    else:
        thresholds = np.asarray(thresholds, dtype=float)
        if thresholds.size < 2:
            raise ContractError("need at least 2 thresholds")
        taus = np.sort(thresholds)[::-1]
        rows = [point_metrics(confusion(p, y, t)) for t in taus]
        curve = PRCurve(taus,
                        np.array([r["Pre"] for r in rows]),
                        np.array([r["Rec"] for r in rows]),
                        np.array([r["Fsc"] for r in rows]))
    return float(curve.f_score.max()), float(average_precision(curve)), curve


def report_lines(metricset: dict) -> list:
    """Fixed-width text table rows for a metric dict."""
    return [f"{name:<6} {value:8.4f}" for name, value in metricset.items()]
