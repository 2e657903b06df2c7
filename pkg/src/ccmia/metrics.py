"""AUC, RNMSE and edge AUC."""

from __future__ import annotations

import numpy as np


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("AUC needs at least one positive and one negative")
    return s, y


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold, from (0,0) to (1,1)."""
    s, y = _scored(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # one ROC point per distinct score, so tied scores form a diagonal segment
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return fpr, tpr


def auc(scores, labels) -> float:
    """Area under the ROC curve by the trapezoid rule (ties get half credit)."""
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc_rank(scores, labels) -> float:
    """Mann-Whitney form: [#(pos > neg) + 0.5 #(pos = neg)] / (P N) via midranks."""
    s, y = _scored(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    P, N = y.sum(), (~y).sum()
    return float((ranks[y].sum() - P * (P + 1) / 2.0) / (P * N))


def auc_null_std(n_pos: int, n_neg: int) -> float:
    """Standard deviation of the AUC of uninformative scores (Mann-Whitney null)."""
    return float(np.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg)))


def rnmse(x, x_hat) -> float:
    """||x - x_hat|| / ||x|| over the flattened inputs."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    ref = np.linalg.norm(x)
    if ref == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(x - x_hat) / ref)


def edge_auc(true_adj, a_cont) -> float:
    """AUC of the strict upper triangle of ``a_cont`` against the true edges."""
    t = np.asarray(true_adj)
    a = np.asarray(a_cont, dtype=np.float64)
    iu = np.triu_indices(t.shape[0], 1)
    return auc(a[iu], t[iu] > 0)
