"""Evaluation metrics and repeat aggregation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata


def auc_roc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC ROC needs both classes present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_at_half(scores: Sequence[float], labels: Sequence[float]) -> float:
    """F1 with predictions ``score >= 0.5``; 0.0 when precision + recall is 0."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float) == 1
    pred = s >= 0.5
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mse(preds: Sequence[float], targets: Sequence[float]) -> float:
    return rmse(preds, targets) ** 2


def grouped_rmse(groups: Mapping[str, tuple[Sequence[float], Sequence[float]]]) -> float:
    """Mean of per-group (e.g. per-county) RMSEs; not the pooled RMSE."""
    return float(np.mean([rmse(p, t) for p, t in groups.values()]))


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); SE is 0 for one value."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.mean(v)), se


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
