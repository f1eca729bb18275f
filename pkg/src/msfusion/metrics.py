"""Rank-based AUROC, tie-aware ROC curves and stratified folds."""

import numpy as np
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    return scores, labels, n_pos, n_neg


def auroc(scores, labels):
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points from ``(0, 0)`` to ``(1, 1)``, one per distinct threshold.

    Tied scores move both coordinates at once, so the trapezoidal area
    equals :func:`auroc`.
    """
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr


def trapezoid_area(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def stratified_kfold(labels, k, seed):
    """``k`` (train_idx, val_idx) pairs; per-fold class counts differ by <= 1."""
    labels = np.asarray(labels).astype(bool).ravel()
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in (True, False):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ValueError(f"class {cls} has {idx.size} members, fewer than k={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(j + offset) % k].append(int(i))
        offset = (offset + idx.size) % k
    all_idx = np.arange(labels.size)
    out = []
    for f in folds:
        val = np.sort(np.array(f, dtype=np.int64))
        train = np.setdiff1d(all_idx, val)
        out.append((train, val))
    return out


def stratified_holdout(labels, fraction, seed):
    """Single stratified split: returns (keep_idx, holdout_idx)."""
    labels = np.asarray(labels).astype(bool).ravel()
    rng = np.random.default_rng(seed)
    hold = []
    for cls in (True, False):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        m = int(round(fraction * idx.size))
        m = min(max(m, 1), idx.size - 1) if idx.size > 1 else 0
        hold.extend(idx[:m].tolist())
    hold = np.sort(np.array(hold, dtype=np.int64))
    return np.setdiff1d(np.arange(labels.size), hold), hold
