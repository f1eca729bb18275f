"""Patient-specific GP regression with an RBF + white-noise kernel.

The white-noise term is a Kronecker delta on *sample index*: two samples
taken at the same time but with different indices share only the RBF part.
A prediction point never shares an index with training data, but it carries
its own noise term, so ``k(t*, t*) = sigma_c2 + sigma_n2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels as kern
from .._accel import USE_NUMBA

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
NOISE_FLOOR = 1e-8
LENGTH_MIN, LENGTH_MAX = 0.5, 84.0
BOUND_FACTORS = (0.01, 100.0)
FALLBACK_THETA = (1.0, 7.0, 0.1)
LOG_2PI = math.log(2.0 * math.pi)


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpHyperparams:
    sigma_c2: float
    length_scale: float
    sigma_n2: float

    def __post_init__(self):
        for name in ("sigma_c2", "length_scale", "sigma_n2"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    def as_log(self):
        return np.log([self.sigma_c2, self.length_scale, self.sigma_n2])

    @classmethod
    def from_log(cls, x):
        a, b, c = np.exp(np.asarray(x, dtype=np.float64))
        return cls(float(a), float(b), float(c))

    def to_json(self):
        return {"sigma_c2": self.sigma_c2, "length_scale": self.length_scale, "sigma_n2": self.sigma_n2}


@dataclass(frozen=True)
class GpBounds:
    lower: GpHyperparams
    upper: GpHyperparams
    initial: GpHyperparams
    fallback: bool = False

    def __post_init__(self):
        lo, hi, x0 = self.lower.as_log(), self.upper.as_log(), self.initial.as_log()
        if np.any(lo >= hi):
            raise ValueError("lower bounds must be below upper bounds")
        if np.any(x0 < lo - 1e-12) or np.any(x0 > hi + 1e-12):
            raise ValueError("initial theta outside bounds")

    def to_json(self):
        return {
            "lower": self.lower.to_json(),
            "upper": self.upper.to_json(),
            "initial": self.initial.to_json(),
            "fallback": self.fallback,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            GpHyperparams(**doc["lower"]),
            GpHyperparams(**doc["upper"]),
            GpHyperparams(**doc["initial"]),
            doc.get("fallback", False),
        )


@dataclass(frozen=True, eq=False)
class GpFit:
    theta: GpHyperparams
    times: np.ndarray
    values: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    lml: float
    jitter: float = 0.0
    bounds: GpBounds | None = None

    def __eq__(self, other):
        if not isinstance(other, GpFit):
            return NotImplemented
        return (
            self.theta == other.theta
            and self.lml == other.lml
            and self.jitter == other.jitter
            and all(a.tobytes() == b.tobytes() for a, b in zip(
                (self.times, self.values, self.chol, self.alpha),
                (other.times, other.values, other.chol, other.alpha),
            ))
        )

    def to_json(self):
        return {
            "theta": self.theta.to_json(),
            "bounds": None if self.bounds is None else self.bounds.to_json(),
            "lml": self.lml,
            "jitter": self.jitter,
            "times": self.times.tolist(),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        """Rebuild the cached factorization from stored data and theta."""
        theta = GpHyperparams(**doc["theta"])
        bounds = None if doc.get("bounds") is None else GpBounds.from_json(doc["bounds"])
        return condition(np.asarray(doc["times"], float), np.asarray(doc["values"], float), theta, bounds)


def _as_vec(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).ravel())


def kernel_value(ti, tj, same_index, theta):
    d = float(ti) - float(tj)
    v = theta.sigma_c2 * math.exp(-d * d / (2.0 * theta.length_scale**2))
    return v + (theta.sigma_n2 if same_index else 0.0)


def kernel_matrix(times, theta):
    times = _as_vec(times)
    if times.size == 0:
        raise ValueError("times must be non-empty")
    return kern.gram(times, theta.sigma_c2, theta.length_scale, theta.sigma_n2)


def log_marginal_likelihood(times, values, theta):
    """``-1/2 y'K^-1 y - 1/2 log|K| - n/2 log 2pi`` via the Cholesky factor."""
    times, values = _as_vec(times), _as_vec(values)
    if times.shape != values.shape or times.size == 0:
        raise ValueError("times and values must be non-empty and equally long")
    lml, _, _, _, ok = kern.lml_terms(times, values, theta.as_log())
    if not ok:
        raise GpFitError("kernel matrix not positive definite even with maximal jitter")
    return float(lml)


def lml_gradient(times, values, theta):
    """Gradient of the LML with respect to the log-hyperparameters."""
    _, g, _, _, ok = kern.lml_terms(_as_vec(times), _as_vec(values), theta.as_log())
    if not ok:
        raise GpFitError("kernel matrix not positive definite even with maximal jitter")
    return np.asarray(g)


def _bounds_around(init, fallback):
    lo_f, hi_f = BOUND_FACTORS
    lower = [init[0] * lo_f, max(init[1] * lo_f, LENGTH_MIN), init[2] * lo_f]
    upper = [init[0] * hi_f, min(init[1] * hi_f, LENGTH_MAX), init[2] * hi_f]
    if lower[1] >= upper[1]:
        lower[1], upper[1] = LENGTH_MIN, LENGTH_MAX
    init = list(init)
    init[1] = min(max(init[1], lower[1]), upper[1])
    return GpBounds(GpHyperparams(*lower), GpHyperparams(*upper), GpHyperparams(*init), fallback)


def heuristic_init(times, values):
    """Per-series initial theta and box bounds from simple data summaries.

    sigma_c2 from the series variance, the length-scale from three times the
    median sampling gap, sigma_n2 from the residual variance of a straight
    line fit. Bounds are ``initial * [0.01, 100]`` with the length-scale
    kept inside ``[0.5, 84]`` days. Fewer than three points use fixed
    defaults and set ``fallback``.
    """
    times, values = _as_vec(times), _as_vec(values)
    n = times.size
    if n < 3:
        log.debug("heuristic_init: n=%d < 3, using fallback defaults", n)
        return _bounds_around(FALLBACK_THETA, True)
    yc = values - values.mean()
    var = max(float(yc @ yc) / n, VAR_FLOOR)
    gaps = np.diff(np.sort(times))
    gaps = np.sort(gaps[gaps > 0])
    m = gaps.size // 2
    if gaps.size == 0:
        length = 3.0
    else:
        length = 3.0 * float(gaps[m] if gaps.size % 2 else 0.5 * (gaps[m - 1] + gaps[m]))
    tc = times - times.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ yc) / sxx if sxx > 0 else 0.0
    resid = yc - slope * tc
    noise = max(float(resid @ resid) / n, NOISE_FLOOR)
    if noise <= 1e-15 * max(var, 1.0):
        noise = NOISE_FLOOR
    return _bounds_around((var, length, noise), False)


def condition(times, values, theta, bounds=None):
    """Factorize ``K + jitter*I`` for fixed ``theta`` and cache ``alpha``."""
    times, values = _as_vec(times), _as_vec(values)
    K = kern.gram(times, theta.sigma_c2, theta.length_scale, theta.sigma_n2)
    L, jitter, ok = kern.chol_jitter(K)
    if not ok:
        raise GpFitError("kernel matrix not positive definite even with maximal jitter")
    alpha = linalg.cho_solve((L, True), values, check_finite=False)
    lml = -0.5 * float(values @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * times.size * LOG_2PI
    return GpFit(theta, times, values, np.asarray(L), alpha, lml, float(jitter), bounds)


def fit_gp(times, values, bounds=None, restarts=5, seed=0, key=None, max_iter=200, gtol=1e-6):
    """Maximize the LML inside ``bounds`` with ``restarts`` local ascents.

    The first ascent starts at the heuristic initial; further starts are
    drawn log-uniformly inside the bounds from ``seed``. The best run is
    kept, so the returned LML is never below the value at the initial.
    """
    times, values = _as_vec(times), _as_vec(values)
    if times.size == 0 or times.shape != values.shape:
        raise ValueError("times and values must be non-empty and equally long")
    if bounds is None:
        bounds = heuristic_init(times, values)
    lo, hi = bounds.lower.as_log(), bounds.upper.as_log()
    rng = np.random.default_rng(seed)
    starts = [bounds.initial.as_log()]
    for _ in range(max(restarts, 1) - 1):
        starts.append(lo + rng.random(3) * (hi - lo))
    best_x, best_f = None, -np.inf
    for x0 in starts:
        x, f, _, ok = kern.ascent(times, values, np.ascontiguousarray(x0), lo, hi, max_iter, gtol, USE_NUMBA)
        if ok and f > best_f:
            best_x, best_f = np.array(x), f
    if best_x is None:
        raise GpFitError(f"all {len(starts)} restarts failed to factorize for {key or 'series'}")
    return condition(times, values, GpHyperparams.from_log(best_x), bounds)


def _kss(theta):
    return theta.sigma_c2 + theta.sigma_n2


def posterior(fit, t_star):
    """Posterior predictive mean and variance at ``t_star`` (scalar or array).

    Variances are clamped at zero; tiny negative round-off is logged.
    """
    scalar = np.ndim(t_star) == 0
    ts = _as_vec(t_star)
    th = fit.theta
    Ks = kern.cross(ts, fit.times, th.sigma_c2, th.length_scale)
    mean = Ks @ fit.alpha
    v = linalg.solve_triangular(fit.chol, Ks.T, lower=True, check_finite=False)
    var = _kss(th) - np.sum(v * v, axis=0)
    if np.any(var < 0):
        if np.min(var) < -1e-10:
            log.warning("posterior variance %.3g < 0 clamped", float(np.min(var)))
        var = np.maximum(var, 0.0)
    if scalar:
        return float(mean[0]), float(var[0])
    return mean, var


def posterior_joint(fit, grid):
    """Joint posterior mean and covariance over ``grid`` (each grid point
    has its own noise index)."""
    grid = _as_vec(grid)
    th = fit.theta
    Ks = kern.cross(grid, fit.times, th.sigma_c2, th.length_scale)
    mean = Ks @ fit.alpha
    V = linalg.solve_triangular(fit.chol, Ks.T, lower=True, check_finite=False)
    cov = kern.gram(grid, th.sigma_c2, th.length_scale, th.sigma_n2) - V.T @ V
    return mean, 0.5 * (cov + cov.T)


def sample_trajectory(fit, grid, seed, n_samples=None):
    """One joint draw (or ``n_samples`` draws) from the posterior over ``grid``."""
    grid = _as_vec(grid)
    if grid.size == 0:
        raise ValueError("grid must be non-empty")
    mean, cov = posterior_joint(fit, grid)
    L, _, ok = kern.chol_jitter(cov)
    if not ok:
        raise GpFitError("posterior covariance not positive definite even with maximal jitter")
    rng = np.random.default_rng(seed)
    if n_samples is None:
        return mean + L @ rng.standard_normal(grid.size)
    z = rng.standard_normal((n_samples, grid.size))
    return mean[None, :] + z @ L.T


def complete_trajectory(channel, fit, grid=None, seed=0, scale=None):
    """Dense trajectory on ``grid`` (default days 0..84).

    Observed days carry the original values bitwise; the other days come
    from one joint posterior draw. ``scale=(mean, std)`` maps the fit's
    standardized units back to channel units.
    """
    from ..cohort import N_DAYS

    grid = np.arange(N_DAYS, dtype=np.float64) if grid is None else _as_vec(grid)
    days = channel.days.astype(np.float64)
    if days.shape != fit.times.shape or not np.array_equal(days, fit.times):
        raise ValueError(f"fit for {channel.channel_id} was not trained on this channel's days")
    out = np.empty(grid.size)
    pos = np.searchsorted(days, grid)
    pos_c = np.minimum(pos, max(days.size - 1, 0))
    obs_mask = (pos < days.size) & (days[pos_c] == grid) if days.size else np.zeros(grid.size, bool)
    missing = grid[~obs_mask]
    if missing.size:
        draw = sample_trajectory(fit, missing, seed)
        if scale is not None:
            draw = scale[0] + scale[1] * draw
        out[~obs_mask] = draw
    out[obs_mask] = channel.values[pos_c[obs_mask]]
    return out
