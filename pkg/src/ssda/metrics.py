"""Classification metrics and the exact Wilcoxon signed-rank test."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

MAX_EXACT = 25


def _as_int(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).reshape(-1)


def accuracy(preds, labels) -> float:
    p, y = _as_int(preds), _as_int(labels)
    if len(p) != len(y) or len(p) == 0:
        raise ValueError("preds and labels must be non-empty and of equal length")
    return float(np.mean(p == y))


def confusion(preds, labels, K: int, normalize: bool = False) -> np.ndarray:
    """Rows are ground truth, columns predictions. Normalised rows sum to 1; empty rows stay 0."""
    p, y = _as_int(preds), _as_int(labels)
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    if not normalize:
        return cm
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros((K, K)), where=sums > 0)


def macro_f1(preds, labels, K: int) -> float:
    """Unweighted mean of per-class F1 over all K classes; a class with P + R = 0 scores 0."""
    if len(_as_int(preds)) != len(_as_int(labels)) or len(_as_int(preds)) == 0:
        raise ValueError("preds and labels must be non-empty and of equal length")
    cm = confusion(preds, labels, K)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(K), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(K), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(K), where=denom > 0)
    return float(f1.mean())


def signed_rank_distribution(ranks: Sequence[float]) -> dict[int, int]:
    """Counts of each doubled W+ value over all 2^n sign assignments.

    Ranks may be half-integers (ties), so the statistic is tracked as 2 * W+.
    """
    counts = {0: 1}
    for r in ranks:
        step = int(round(2 * r))
        nxt = dict(counts)
        for w, c in counts.items():
            nxt[w + step] = nxt.get(w + step, 0) + c
        counts = nxt
    return counts


def wilcoxon_exact(differences: Sequence[float]) -> float:
    """Exact two-sided p-value of the signed-rank test (zeros dropped, average ranks for ties)."""
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    if n > MAX_EXACT:
        raise ValueError(f"exact enumeration supports at most {MAX_EXACT} non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = int(round(2 * ranks[d > 0].sum()))
    dist = signed_rank_distribution(ranks)
    total = 2 ** n
    lower = sum(c for w, c in dist.items() if w <= w_plus) / total
    upper = sum(c for w, c in dist.items() if w >= w_plus) / total
    return min(1.0, 2 * min(lower, upper))
