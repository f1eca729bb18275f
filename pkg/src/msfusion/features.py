"""Windowed trajectory statistics and feature selection (ANOVA F, RFE)."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, njit
from .cohort import CHANNELS, N_DAYS
from .logistic import fit_logistic
from .table import FeatureTable

log = logging.getLogger(__name__)

STATISTICS = ("mean", "variance", "slope", "intercept")


@dataclass(frozen=True)
class WindowSpec:
    window_length: int = 28
    stride: int = 28
    statistics: tuple = ("mean", "variance", "slope")

    def __post_init__(self):
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown:
            raise ValueError(f"unknown statistics {sorted(unknown)}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.window_length < 1 or ("slope" in self.statistics and self.window_length < 2):
            raise ValueError("window_length must be >= 2 when slope is requested")

    def n_windows(self, length=N_DAYS):
        if self.window_length > length:
            return 1
        return (length - self.window_length) // self.stride + 1


def _window_stats_np(traj, window, stride):
    n, T = traj.shape
    n_win = (T - window) // stride + 1
    starts = np.arange(n_win) * stride
    idx = starts[:, None] + np.arange(window)[None, :]
    seg = traj[:, idx]  # (n, n_win, window)
    x = np.arange(window, dtype=np.float64)
    xc = x - x.mean()
    mean = seg.mean(axis=2)
    var = seg.var(axis=2)
    slope = (seg - mean[..., None]) @ xc / (xc @ xc)
    intercept = mean - slope * x.mean()
    return np.stack([mean, var, slope, intercept], axis=2)


@njit
def _window_stats_nb(traj, window, stride):
    n, T = traj.shape
    n_win = (T - window) // stride + 1
    out = np.empty((n, n_win, 4))
    xbar = (window - 1) / 2.0
    sxx = 0.0
    for k in range(window):
        sxx += (k - xbar) ** 2
    for i in range(n):
        for w in range(n_win):
            s0 = w * stride
            m = 0.0
            for k in range(window):
                m += traj[i, s0 + k]
            m /= window
            v = 0.0
            sxy = 0.0
            for k in range(window):
                d = traj[i, s0 + k] - m
                v += d * d
                sxy += (k - xbar) * d
            out[i, w, 0] = m
            out[i, w, 1] = v / window
            slope = sxy / sxx if sxx > 0 else 0.0
            out[i, w, 2] = slope
            out[i, w, 3] = m - slope * xbar
    return out


def window_stats(traj, window, stride, use_numba=None):
    """Array ``(n, n_windows, 4)`` of mean, population variance, OLS slope and
    intercept (at the window's first day) for each row of ``traj``."""
    traj = np.ascontiguousarray(np.atleast_2d(traj), dtype=np.float64)
    if window > traj.shape[1]:
        warnings.warn(f"window {window} longer than trajectory {traj.shape[1]}; using one full window")
        window, stride = traj.shape[1], 1
    if use_numba is None:
        use_numba = USE_NUMBA
    return (_window_stats_nb if use_numba else _window_stats_np)(traj, window, stride)


def _names(channel, n_win, stats):
    return [f"{channel}__w{w}__{s}" for w in range(n_win) for s in stats]


def windowed_features(trajectory, spec=None, channel="series"):
    """Named statistics for one dense trajectory: ``(names, values)``."""
    spec = spec or WindowSpec()
    out = window_stats(trajectory, spec.window_length, spec.stride)[0]
    cols = [STATISTICS.index(s) for s in spec.statistics]
    vals = out[:, cols].reshape(-1)
    return _names(channel, out.shape[0], spec.statistics), vals


def cohort_window_features(cohort, spec=None, channels=CHANNELS):
    """FeatureTable of windowed statistics for a cohort of dense trajectories."""
    spec = spec or WindowSpec()
    cols = [STATISTICS.index(s) for s in spec.statistics]
    blocks, names = [], []
    for cid in channels:
        traj = np.array([p.channels[cid].values for p in cohort], dtype=np.float64).reshape(len(cohort), -1)
        stats = window_stats(traj, spec.window_length, spec.stride)
        blocks.append(stats[:, :, cols].reshape(len(cohort), -1))
        names.extend(_names(cid, stats.shape[1], spec.statistics))
    matrix = np.hstack(blocks) if blocks else np.zeros((len(cohort), 0))
    return FeatureTable(matrix, tuple(names), tuple(cohort.ids))


def anova_f(features, labels):
    """Two-group one-way ANOVA F statistic per column.

    Columns with no within-group spread get ``inf`` if the group means
    differ and ``0`` otherwise.
    """
    X = np.asarray(getattr(features, "matrix", features), dtype=np.float64)
    y = np.asarray(labels).astype(bool).ravel()
    n1, n = int(y.sum()), y.size
    if n1 == 0 or n1 == n:
        raise ValueError("ANOVA F needs both classes")
    if n < 3:
        raise ValueError("ANOVA F needs at least three rows")
    center = X.mean(axis=0)
    Xc = X - center
    scale = np.max(np.abs(X), axis=0)
    g1, g0 = Xc[y], Xc[~y]
    m1, m0 = g1.mean(axis=0), g0.mean(axis=0)
    ssw = ((g1 - m1) ** 2).sum(axis=0) + ((g0 - m0) ** 2).sum(axis=0)
    ssb = n1 * m1**2 + (n - n1) * m0**2
    tiny = (1e-12 * scale) ** 2 * n
    F = np.zeros(X.shape[1])
    no_within = ssw <= tiny
    no_between = ssb <= tiny
    ok = ~no_within
    F[ok] = (ssb[ok] / 1.0) / (ssw[ok] / (n - 2))
    F[no_within & ~no_between] = np.inf
    F[no_within & no_between] = 0.0
    return F


def select_k_best(features, labels, k):
    """Indices of the ``k`` largest F values (stable: earlier column wins ties)."""
    F = anova_f(features, labels)
    order = sorted(range(F.size), key=lambda i: (-F[i], i))
    return sorted(order[: min(k, F.size)])


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def rfe(features, labels, keep, l2=1.0, max_iter=5000, tol=1e-6):
    """Recursive feature elimination with the logistic baseline.

    Columns are standardized; each round refits and drops the column with
    the smallest absolute weight, the lower index first on ties. Returns
    sorted original column indices.
    """
    X = np.asarray(getattr(features, "matrix", features), dtype=np.float64)
    y = np.asarray(labels).astype(bool).ravel()
    d = X.shape[1]
    if keep > d or keep < 0:
        raise ValueError(f"keep={keep} outside [0, {d}]")
    if min(int(y.sum()), int((~y).sum())) < 2:
        raise ValueError("RFE needs at least two rows per class")
    Z = _standardize(X)
    remaining = list(range(d))
    while len(remaining) > keep:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = fit_logistic(Z[:, remaining], y, l2=l2, max_iter=max_iter, tol=tol)
        except (FloatingPointError, ValueError) as exc:
            warnings.warn(f"RFE aborted with {len(remaining)} columns: {exc}")
            break
        mags = np.abs(model.weights)
        lowest = mags.min()
        ties = np.flatnonzero(mags <= lowest + 1e-12 * max(lowest, 1e-300) + 1e-15)
        remaining.pop(int(ties[0]))
    return remaining


@dataclass(frozen=True)
class SelectionSpec:
    """ANOVA prefilter to ``anova_k`` columns, then RFE down to ``rfe_keep``.
    ``None`` disables a stage."""

    anova_k: int | None = 40
    rfe_keep: int | None = 20
    l2: float = 1.0


def select_features(table, labels, spec):
    """Column names chosen on ``table`` (train rows only)."""
    idx = list(range(table.shape[1]))
    if spec.anova_k is not None and spec.anova_k < len(idx):
        idx = select_k_best(table.matrix, labels, spec.anova_k)
    if spec.rfe_keep is not None and spec.rfe_keep < len(idx):
        sub = rfe(table.matrix[:, idx], labels, spec.rfe_keep, l2=spec.l2)
        idx = [idx[i] for i in sub]
    return [table.column_names[i] for i in idx]

