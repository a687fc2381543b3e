"""AUC / accuracy / F1 and fold aggregation."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(tie), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs, labels) -> float:
    """Unweighted mean of one-vs-rest AUCs. For K=2 this is the class-1 AUC."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    K = p.shape[1]
    missing = [k for k in range(K) if not np.any(y == k)]
    if missing:
        raise UndefinedMetricError(f"classes {missing} absent from labels")
    if K == 2:
        return roc_auc(p[:, 1], y == 1)
    return float(np.mean([roc_auc(p[:, k], y == k) for k in range(K)]))


def predictions(probs) -> np.ndarray:
    # np.argmax already resolves ties toward the lowest index
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(probs, labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(predictions(probs) == y))


def f1_macro(probs, labels) -> float:
    p = np.asarray(probs)
    y = np.asarray(labels)
    pred = predictions(p)
    scores = []
    for k in range(p.shape[1]):
        tp = np.sum((pred == k) & (y == k))
        fp = np.sum((pred == k) & (y != k))
        fn = np.sum((pred != k) & (y == k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std())
