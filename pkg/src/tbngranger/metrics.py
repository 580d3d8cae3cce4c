"""Ranking metrics shared by anomaly scoring and structure evaluation."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def rank_auc(scores, labels) -> float | None:
    """AUC-ROC from the Mann-Whitney statistic with midranks for ties.

    Returns ``None`` when labels are all one class (AUC undefined).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sweep_auc(scores, labels) -> float | None:
    """AUC-ROC by sweeping every distinct threshold and integrating the ROC (trapezoids)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    tpr, fpr = [0.0], [0.0]
    for thr in np.unique(s)[::-1]:
        pred = s >= thr
        tpr.append((pred & y).sum() / n_pos)
        fpr.append((pred & ~y).sum() / n_neg)
    area = 0.0
    for k in range(1, len(tpr)):
        area += (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1]) / 2.0
    return float(area)


def balanced_accuracy(pred, labels) -> float:
    pred = np.asarray(pred).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    parts = []
    if y.any():
        parts.append((pred & y).sum() / y.sum())
    if (~y).any():
        parts.append((~pred & ~y).sum() / (~y).sum())
    return float(np.mean(parts))
