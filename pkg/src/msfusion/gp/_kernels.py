"""Hot GP kernels: Gram matrices, jittered Cholesky, LML with gradient and
Fisher information, and the bounded ascent loop used by ``fit_gp``.

Every kernel exists as ``*_nb`` (numba loops) and ``*_np`` (numpy/scipy);
the unsuffixed names dispatch on :data:`msfusion._accel.USE_NUMBA`.
Hyperparameters travel as ``x = log([sigma_c2, length_scale, sigma_n2])``.
"""

import math
import types

import numpy as np
from scipy import linalg

from .._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------


def _gram_np(times, sigma_c2, length_scale, sigma_n2):
    diff = times[:, None] - times[None, :]
    K = sigma_c2 * np.exp(-0.5 * diff * diff / (length_scale * length_scale))
    K[np.diag_indices_from(K)] += sigma_n2
    return K


@njit
def _gram_nb(times, sigma_c2, length_scale, sigma_n2):
    n = times.shape[0]
    K = np.empty((n, n))
    inv2l2 = 0.5 / (length_scale * length_scale)
    for i in range(n):
        K[i, i] = sigma_c2 + sigma_n2
        for j in range(i):
            d = times[i] - times[j]
            v = sigma_c2 * math.exp(-d * d * inv2l2)
            K[i, j] = v
            K[j, i] = v
    return K


def _cross_np(t_star, times, sigma_c2, length_scale):
    diff = t_star[:, None] - times[None, :]
    return sigma_c2 * np.exp(-0.5 * diff * diff / (length_scale * length_scale))


@njit
def _cross_nb(t_star, times, sigma_c2, length_scale):
    m = t_star.shape[0]
    n = times.shape[0]
    out = np.empty((m, n))
    inv2l2 = 0.5 / (length_scale * length_scale)
    for i in range(m):
        for j in range(n):
            d = t_star[i] - times[j]
            out[i, j] = sigma_c2 * math.exp(-d * d * inv2l2)
    return out


# ---------------------------------------------------------------------------
# Cholesky with jitter escalation
# ---------------------------------------------------------------------------


def _chol_jitter_np(K):
    """Return ``(L, jitter, ok)``; plain factorization first, then jitter
    from ``1e-10 * mean(diag)`` escalating x10 up to ``1e-4 * mean(diag)``."""
    scale = float(np.mean(np.diag(K)))
    jitter = 0.0
    n = K.shape[0]
    while True:
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
                return L, jitter, True
        except linalg.LinAlgError:
            pass
        if jitter == 0.0:
            jitter = JITTER_START * scale
        else:
            jitter *= 10.0
        if not (jitter <= JITTER_MAX * scale * 1.000001) or not np.isfinite(jitter):
            return np.zeros_like(K), jitter, False


@njit
def _cholesky_nb(A):
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0) or not math.isfinite(s):
            return L, False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    return L, True


@njit
def _chol_jitter_nb(K):
    n = K.shape[0]
    scale = 0.0
    for i in range(n):
        scale += K[i, i]
    scale /= n
    L, ok = _cholesky_nb(K)
    if ok:
        return L, 0.0, True
    jitter = JITTER_START * scale
    while jitter <= JITTER_MAX * scale * 1.000001:
        A = K.copy()
        for i in range(n):
            A[i, i] += jitter
        L, ok = _cholesky_nb(A)
        if ok:
            return L, jitter, True
        jitter *= 10.0
    return L, jitter, False


@njit
def _forward_nb(L, b):
    n = L.shape[0]
    x = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    return x


@njit
def _backward_t_nb(L, b):
    # solves L^T x = b
    n = L.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit
def _tri_inverse_t_nb(L):
    """Transpose of ``L^{-1}`` (upper triangular), built row by row so the
    inner products run over contiguous memory."""
    n = L.shape[0]
    U = np.zeros((n, n))
    for j in range(n):
        U[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * U[j, k]
            U[j, i] = s / L[i, i]
    return U


# ---------------------------------------------------------------------------
# Log marginal likelihood, gradient, Fisher information
# ---------------------------------------------------------------------------


def _lml_terms_np(times, y, x, want_fisher=True):
    """LML, its gradient and Fisher information w.r.t. log-hyperparameters.

    Returns ``(lml, grad, fisher, jitter, ok)``. The jitter is treated as a
    constant when differentiating. ``fisher`` is zero unless ``want_fisher``.
    """
    sigma_c2, length_scale, sigma_n2 = np.exp(x)
    n = times.shape[0]
    diff = times[:, None] - times[None, :]
    d2 = diff * diff / (length_scale * length_scale)
    Krbf = sigma_c2 * np.exp(-0.5 * d2)
    K = Krbf + sigma_n2 * np.eye(n)
    L, jitter, ok = _chol_jitter_np(K)
    if not ok:
        return -np.inf, np.zeros(3), np.zeros((3, 3)), jitter, False
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    lml = -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI
    Linv = linalg.solve_triangular(L, np.eye(n), lower=True, check_finite=False)
    Kinv = Linv.T @ Linv
    Dl = Krbf * d2
    A_c = Kinv @ Krbf
    A_l = Kinv @ Dl
    A_n = sigma_n2 * Kinv
    grad = np.array(
        [
            0.5 * alpha @ Krbf @ alpha - 0.5 * np.trace(A_c),
            0.5 * alpha @ Dl @ alpha - 0.5 * np.trace(A_l),
            0.5 * sigma_n2 * alpha @ alpha - 0.5 * np.trace(A_n),
        ]
    )
    fisher = np.zeros((3, 3))
    if not want_fisher:
        return float(lml), grad, fisher, jitter, True
    mats = (A_c, A_l, A_n)
    for a in range(3):
        for b in range(a, 3):
            v = 0.5 * np.sum(mats[a] * mats[b].T)
            fisher[a, b] = v
            fisher[b, a] = v
    return float(lml), grad, fisher, jitter, True


@njit
def _lml_terms_nb(times, y, x, want_fisher=True):
    sigma_c2 = math.exp(x[0])
    length_scale = math.exp(x[1])
    sigma_n2 = math.exp(x[2])
    n = times.shape[0]
    inv_l2 = 1.0 / (length_scale * length_scale)
    Krbf = np.empty((n, n))
    Dl = np.empty((n, n))
    for i in range(n):
        Krbf[i, i] = sigma_c2
        Dl[i, i] = 0.0
        for j in range(i):
            d = times[i] - times[j]
            d2 = d * d * inv_l2
            v = sigma_c2 * math.exp(-0.5 * d2)
            Krbf[i, j] = v
            Krbf[j, i] = v
            Dl[i, j] = v * d2
            Dl[j, i] = v * d2
    K = Krbf.copy()
    for i in range(n):
        K[i, i] += sigma_n2
    grad = np.zeros(3)
    fisher = np.zeros((3, 3))
    L, jitter, ok = _chol_jitter_nb(K)
    if not ok:
        return -np.inf, grad, fisher, jitter, False
    alpha = _backward_t_nb(L, _forward_nb(L, y))
    logdet = 0.0
    for i in range(n):
        logdet += math.log(L[i, i])
    logdet *= 2.0
    lml = -0.5 * np.dot(y, alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI
    U = _tri_inverse_t_nb(L)
    Kinv = np.dot(U, U.T)
    # Krbf = K - s*I, hence Kinv @ Krbf = I - s*Kinv; saves a matmul.
    s = sigma_n2 + jitter
    quad_c = np.dot(alpha, np.dot(Krbf, alpha))
    quad_l = np.dot(alpha, np.dot(Dl, alpha))
    tr_l = 0.0
    tr_k = 0.0
    for i in range(n):
        tr_k += Kinv[i, i]
        for j in range(n):
            tr_l += Kinv[i, j] * Dl[i, j]
    tr_c = n - s * tr_k
    grad[0] = 0.5 * quad_c - 0.5 * tr_c
    grad[1] = 0.5 * quad_l - 0.5 * tr_l
    grad[2] = 0.5 * sigma_n2 * np.dot(alpha, alpha) - 0.5 * sigma_n2 * tr_k
    if not want_fisher:
        return lml, grad, fisher, jitter, True
    A_l = np.dot(Kinv, Dl)
    s_ll = 0.0
    s_kk = 0.0
    s_kl = 0.0
    for i in range(n):
        for j in range(n):
            s_ll += A_l[i, j] * A_l[j, i]
            s_kk += Kinv[i, j] * Kinv[i, j]
            s_kl += Kinv[i, j] * A_l[j, i]
    s_cc = n - 2.0 * s * tr_k + s * s * s_kk
    s_cl = tr_l - s * s_kl
    s_kc = tr_k - s * s_kk
    fisher[0, 0] = 0.5 * s_cc
    fisher[1, 1] = 0.5 * s_ll
    fisher[2, 2] = 0.5 * sigma_n2 * sigma_n2 * s_kk
    fisher[0, 1] = fisher[1, 0] = 0.5 * s_cl
    fisher[0, 2] = fisher[2, 0] = 0.5 * sigma_n2 * s_kc
    fisher[1, 2] = fisher[2, 1] = 0.5 * sigma_n2 * s_kl
    return lml, grad, fisher, jitter, True


# ---------------------------------------------------------------------------
# Bounded Fisher-scoring ascent
# ---------------------------------------------------------------------------


def _ascent_impl(times, y, x0, lo, hi, max_iter, gtol):
    """Projected quasi-Newton ascent in log space.

    The curvature model starts at the Fisher information and is refined by
    BFGS updates (reset to the current Fisher matrix when the active set
    changes). Bound-active coordinates whose gradient points outward are
    frozen for the step; a backtracking line search only accepts
    non-decreasing LML, so the result never falls below the starting value.
    Returns ``(x, lml, iterations, ok)``.
    """
    x = np.minimum(np.maximum(x0.copy(), lo), hi)
    f, g, F, jit, ok = _evaluate(times, y, x, True)
    if not ok:
        return x, -np.inf, 0, False
    B = F.copy()
    prev_free = np.ones(3)
    it = 0
    while it < max_iter:
        it += 1
        free = np.ones(3)
        for k in range(3):
            if (x[k] <= lo[k] + 1e-12 and g[k] < 0.0) or (x[k] >= hi[k] - 1e-12 and g[k] > 0.0):
                free[k] = 0.0
        pg = g * free
        if np.max(np.abs(pg)) < gtol:
            break
        if np.any(free != prev_free):
            B = _evaluate(times, y, x, True)[2]
        prev_free = free
        ridge = 1e-9 * (B[0, 0] + B[1, 1] + B[2, 2] + 1.0)
        M = np.zeros((3, 3))
        for a in range(3):
            for b in range(3):
                M[a, b] = B[a, b] * free[a] * free[b]
            M[a, a] += (1.0 - free[a]) + ridge
        d = np.linalg.solve(M, pg)
        if not (np.dot(d, pg) > 0.0) or not np.all(np.isfinite(d)):
            B = _evaluate(times, y, x, True)[2]
            d = pg.copy()
        big = np.max(np.abs(d))
        if big > 2.0:
            d = d * (2.0 / big)
        step = 1.0
        accepted = False
        fn, gn, xn = f, g, x
        for _ in range(40):
            xn = np.minimum(np.maximum(x + step * d, lo), hi)
            fn, gn, _, jn, okn = _evaluate(times, y, xn, False)
            if okn and fn >= f + 1e-4 * max(np.dot(pg, xn - x), 0.0):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        gain = fn - f
        sv = xn - x
        yv = g - gn  # gradient change of the negated objective
        sy = np.dot(sv, yv)
        Bs = np.dot(B, sv)
        sBs = np.dot(sv, Bs)
        x, f, g = xn, fn, gn
        if sy > 1e-12 * np.sqrt(np.dot(sv, sv) * np.dot(yv, yv)) and sBs > 0.0:
            B = B + np.outer(yv, yv) / sy - np.outer(Bs, Bs) / sBs
        if gain <= 1e-12 * (1.0 + abs(f)) and np.max(np.abs(sv)) < 1e-8:
            break
    return x, f, it, True


def _bind(func, evaluate, name):
    # The evaluator is bound through the function's globals rather than
    # passed as an argument or closed over: numba cannot cache kernels whose
    # arguments or closure cells are dispatchers.
    env = dict(globals(), _evaluate=evaluate)
    return types.FunctionType(func.__code__, env, name, func.__defaults__)


_ascent_np = _bind(_ascent_impl, _lml_terms_np, "_ascent_np")
_ascent_nb = njit(_bind(_ascent_impl, _lml_terms_nb, "_ascent_nb"))


def ascent(times, y, x0, lo, hi, max_iter=200, gtol=1e-6, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return _ascent_nb(times, y, x0, lo, hi, max_iter, gtol)
    return _ascent_np(times, y, x0, lo, hi, max_iter, gtol)


if USE_NUMBA:
    gram = _gram_nb
    cross = _cross_nb
    chol_jitter = _chol_jitter_nb
    lml_terms = _lml_terms_nb
else:
    gram = _gram_np
    cross = _cross_np
    chol_jitter = _chol_jitter_np
    lml_terms = _lml_terms_np
