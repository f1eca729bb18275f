"""L2-regularized logistic regression, the standard-ML baseline and the
estimator inside RFE."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    l2: float
    column_names: tuple = ()
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self):
        names = self.column_names or tuple(f"x{i}" for i in range(len(self.weights)))
        return {
            # lists, not a name->weight map: key order is not preserved by
            # serializers that sort keys
            "column_names": list(names),
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "l2": float(self.l2),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_json(cls, doc):
        names = tuple(doc["column_names"])
        return cls(np.array(doc["weights"], dtype=np.float64), doc["bias"], doc["l2"], names,
                   doc.get("converged", True), doc.get("n_iter", 0))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _objective(X, y, w, b, l2):
    z = X @ w + b
    # mean BCE written with log-sigmoid for stability
    loss = -np.mean(y * log_expit(z) + (1.0 - y) * log_expit(-z)) + 0.5 * l2 * (w @ w)
    r = expit(z) - y
    gw = X.T @ r / y.size + l2 * w
    gb = r.mean()
    return loss, gw, gb


def fit_logistic(X, labels, l2=1.0, max_iter=5000, tol=1e-6, column_names=()):
    """Minimize mean BCE + (l2/2)||w||^2 by gradient descent.

    Steps use Barzilai-Borwein lengths with Armijo backtracking; the bias is
    not penalized. Stops once the gradient infinity-norm drops below ``tol``
    or after ``max_iter`` iterations (``converged=False``, warning raised).
    """
    if not column_names:
        column_names = getattr(X, "column_names", ())
    X = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, d) matching labels")
    if y.min() == y.max():
        raise ValueError("logistic regression needs both classes")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    n, d = X.shape
    w = np.zeros(d)
    p = y.mean()
    b = float(np.log(p / (1 - p)))
    f, gw, gb = _objective(X, y, w, b, l2)
    step = 1.0
    prev = None
    it = 0
    gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
    while gnorm >= tol and it < max_iter:
        it += 1
        g = np.r_[gw, gb]
        if prev is not None:
            s, dg = np.r_[w, b] - prev[0], g - prev[1]
            sy = s @ dg
            if sy > 1e-300:
                step = float(np.clip((s @ s) / sy, 1e-8, 1e8))
        prev = (np.r_[w, b], g)
        gg = g @ g
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            f_new, gw_new, gb_new = _objective(X, y, w_new, b_new, l2)
            if f_new <= f - 1e-4 * step * gg or step < 1e-14:
                break
            step *= 0.5
        w, b, f, gw, gb = w_new, b_new, f_new, gw_new, gb_new
        gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
        if not np.isfinite(f):
            raise FloatingPointError("logistic objective diverged")
    converged = bool(gnorm < tol)
    if not converged:
        warnings.warn(
            f"logistic fit stopped at max_iter={max_iter} with gradient norm {gnorm:.3g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return LogisticModel(w, float(b), float(l2), tuple(column_names), converged, it, float(gnorm))


def predict_logistic(model, X):
    X = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    return expit(X @ model.weights + model.bias)


def loss_gradient(model, X, labels):
    """Objective gradient at ``model`` as (grad_w, grad_b); used by tests."""
    X = np.asarray(getattr(X, "matrix", X), dtype=np.float64)
    _, gw, gb = _objective(X, np.asarray(labels, dtype=np.float64), model.weights, model.bias, model.l2)
    return gw, gb
