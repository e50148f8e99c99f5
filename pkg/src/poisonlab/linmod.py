"""Regularized least-squares linear classifier (LASSO, ridge, elastic net).

The learner minimizes

    L(w, b) = (1/n) sum_i 1/2 (w.x_i + b - y_i)^2 + lam * Omega(w)

with Omega(w) = |w|_1 (lasso), 1/2 |w|^2 (ridge) or
rho |w|_1 + (1 - rho) 1/2 |w|^2 (elastic net).  The bias is not penalized.

Fitting is cyclic coordinate descent on the Gram (covariance) form of the
problem: with the bias profiled out, each coordinate update is an exact
soft-thresholded minimization and the bias is recovered as
``b = mean(y) - mean(x) . w``.  Working from sufficient statistics lets the
attack add or move a handful of points without touching the full data matrix.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_is_fitted, check_point, check_X, check_Xy
from .exceptions import ConvergenceWarning, DataError

__all__ = [
    "Regularizer",
    "GramStats",
    "LinearModel",
    "fit",
    "predict",
    "classify",
    "accuracy",
    "reg_subgradient",
    "kkt_residual",
    "critical_lambda",
    "save_model",
    "load_model",
]

KINDS = ("lasso", "ridge", "elastic_net")


@dataclass(frozen=True)
class Regularizer:
    kind: str = "lasso"
    rho: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; choose from {KINDS}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @property
    def l1(self) -> float:
        return {"lasso": 1.0, "ridge": 0.0}.get(self.kind, self.rho)

    @property
    def l2(self) -> float:
        return 1.0 - self.l1

    def value(self, w) -> float:
        w = np.asarray(w)
        return self.l1 * float(np.abs(w).sum()) + self.l2 * 0.5 * float(w @ w)

    def subgradient(self, w) -> np.ndarray:
        """dOmega/dw with the convention sub(0) = 0."""
        w = np.asarray(w, dtype=float)
        return self.l1 * np.sign(w) + self.l2 * w


class GramStats:
    """Running sufficient statistics of a least-squares problem.

    Holds n, sum x, sum x x^T, sum y, sum x y and sum y^2 so that rows can be
    added (or removed, with weight -1) in O(d^2).
    """

    def __init__(self, d: int):
        self.n = 0.0
        self.sx = np.zeros(d)
        self.sxx = np.zeros((d, d))
        self.sy = 0.0
        self.sxy = np.zeros(d)
        self.syy = 0.0

    @classmethod
    def from_data(cls, X, y) -> GramStats:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        st = cls(X.shape[1])
        st.n = float(X.shape[0])
        st.sx = X.sum(axis=0)
        st.sxx = X.T @ X
        st.sy = float(y.sum())
        st.sxy = X.T @ y
        st.syy = float(y @ y)
        return st

    def copy(self) -> GramStats:
        st = GramStats(self.sx.shape[0])
        st.n, st.sy, st.syy = self.n, self.sy, self.syy
        st.sx, st.sxx, st.sxy = self.sx.copy(), self.sxx.copy(), self.sxy.copy()
        return st

    def add(self, x, y, weight: float = 1.0) -> GramStats:
        x = np.asarray(x, dtype=float)
        self.n += weight
        self.sx += weight * x
        self.sxx += weight * np.outer(x, x)
        self.sy += weight * y
        self.sxy += weight * y * x
        self.syy += weight * y * y
        return self

    def moments(self):
        """Means and the centered second moments (S, s) of the profiled problem."""
        n = self.n
        mx, my = self.sx / n, self.sy / n
        S = self.sxx / n - np.outer(mx, mx)
        s = self.sxy / n - mx * my
        return mx, my, S, s

    def loss(self, w, b) -> float:
        """(1/n) sum 1/2 (w.x + b - y)^2 evaluated from the statistics."""
        n = self.n
        quad = w @ self.sxx @ w + 2 * b * (self.sx @ w) + n * b * b
        lin = 2 * (w @ self.sxy) + 2 * b * self.sy
        return 0.5 * (quad - lin + self.syy) / n


def _coordinate_descent(S, s, lam, l1, l2, w, tol, max_iter):
    d = s.shape[0]
    thresh = lam * l1
    denom = np.diag(S) + lam * l2
    Sw = S @ w
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(d):
            if denom[j] <= 0.0:
                new = 0.0
            else:
                z = s[j] - Sw[j] + S[j, j] * w[j]
                a = abs(z) - thresh
                new = np.copysign(a, z) / denom[j] if a > 0.0 else 0.0
            delta = new - w[j]
            if delta != 0.0:
                w[j] = new
                Sw += S[:, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            converged = True
            break
    return w, it, converged


class LinearModel(ClassifierMixin, BaseEstimator):
    """Linear classifier f(x) = w.x + b trained by regularized least squares.

    Parameters
    ----------
    lam : float
        Regularization strength (lambda).
    reg : {"lasso", "ridge", "elastic_net"}
    rho : float
        L1 share of the elastic-net penalty; ignored by the other kinds.
    tol : float
        Stop once the largest coordinate change in a sweep is below ``tol``.
    max_iter : int
        Maximum number of coordinate sweeps.
    warm_start : bool
        Start from the current ``coef_`` when refitting.
    """

    def __init__(self, lam=0.1, reg="lasso", rho=0.5, tol=1e-8, max_iter=10_000, warm_start=False):
        self.lam = lam
        self.reg = reg
        self.rho = rho
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start

    @property
    def regularizer(self) -> Regularizer:
        return Regularizer(self.reg, self.rho)

    def _check_params(self):
        if not self.lam >= 0.0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if not self.tol > 0.0 or int(self.max_iter) < 1:
            raise ValueError("tol must be positive and max_iter at least 1")
        return self.regularizer

    def fit(self, X, y):
        X, y = check_Xy(X, y)
        return self.fit_gram(GramStats.from_data(X, y))

    def fit_gram(self, stats: GramStats, w0=None):
        """Fit from sufficient statistics, optionally warm-started at ``w0``."""
        reg = self._check_params()
        if stats.n <= 0:
            raise DataError("cannot fit on an empty dataset")
        mx, my, S, s = stats.moments()
        d = s.shape[0]
        if w0 is not None:
            w = np.array(w0, dtype=float)
        elif self.warm_start and getattr(self, "coef_", None) is not None and self.coef_.shape == (d,):
            w = self.coef_.copy()
        else:
            w = np.zeros(d)
        w, n_iter, converged = _coordinate_descent(S, s, float(self.lam), reg.l1, reg.l2, w,
                                                   float(self.tol), int(self.max_iter))
        if not converged:
            warnings.warn(
                f"coordinate descent did not converge in {self.max_iter} sweeps (tol={self.tol})",
                ConvergenceWarning,
                stacklevel=2,
            )
        self.coef_ = w
        self.intercept_ = float(my - mx @ w)
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.n_features_in_ = d
        self.classes_ = np.array([-1.0, 1.0])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_X(X, n_features=self.n_features_in_)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0.0, 1.0, -1.0)

    def objective(self, X, y) -> float:
        """Training objective L(w, b) on (X, y)."""
        check_is_fitted(self, "coef_")
        X, y = check_Xy(X, y, n_features=self.n_features_in_)
        r = X @ self.coef_ + self.intercept_ - y
        return 0.5 * float(r @ r) / X.shape[0] + self.lam * self.regularizer.value(self.coef_)

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "w": [float(v) for v in self.coef_],
            "b": self.intercept_,
            "lambda": float(self.lam),
            "kind": self.reg,
            "rho": float(self.rho),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> LinearModel:
        m = cls(lam=doc["lambda"], reg=doc["kind"], rho=doc.get("rho", 0.5))
        m._check_params()
        m.coef_ = np.asarray(doc["w"], dtype=float)
        m.intercept_ = float(doc["b"])
        m.n_features_in_ = m.coef_.shape[0]
        m.n_iter_, m.converged_ = 0, True
        m.classes_ = np.array([-1.0, 1.0])
        return m


# ---------------------------------------------------------------------------
# Functional API over Dataset objects


def fit(train, lam: float = 0.1, reg: Regularizer | str = "lasso", tol: float = 1e-8,
        max_iter: int = 10_000) -> LinearModel:
    if isinstance(reg, str):
        reg = Regularizer(reg)
    return LinearModel(lam=lam, reg=reg.kind, rho=reg.rho, tol=tol, max_iter=max_iter).fit(
        train.features, train.labels
    )


def predict(m: LinearModel, x) -> float:
    check_is_fitted(m, "coef_")
    x = check_point(x, m.n_features_in_)
    return float(x @ m.coef_ + m.intercept_)


def classify(m: LinearModel, x) -> float:
    return 1.0 if predict(m, x) >= 0.0 else -1.0


def accuracy(m: LinearModel, d) -> float:
    if d.n == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    return float(np.mean(m.predict(d.features) == d.labels))


def reg_subgradient(m: LinearModel) -> np.ndarray:
    check_is_fitted(m, "coef_")
    return m.regularizer.subgradient(m.coef_)


def kkt_residual(m: LinearModel, X, y) -> dict:
    """Stationarity residuals of the training objective at the fitted (w, b).

    Returns the infinity norms of the active-coordinate residual, the excess
    of the inactive-coordinate gradient over ``lam * l1`` and the bias
    residual.
    """
    X, y = check_Xy(X, y, n_features=m.n_features_in_)
    r = X @ m.coef_ + m.intercept_ - y
    grad = X.T @ r / X.shape[0]
    reg = m.regularizer
    w = m.coef_
    active = w != 0.0
    full = grad + m.lam * reg.subgradient(w)
    act = float(np.max(np.abs(full[active]), initial=0.0))
    inact = float(np.max(np.abs(grad[~active]) - m.lam * reg.l1, initial=0.0))
    if reg.l1 == 0.0:
        inact = float(np.max(np.abs(full[~active]), initial=0.0))
    return {"active": act, "inactive": max(inact, 0.0), "bias": abs(float(r.mean()))}


def critical_lambda(X, y) -> float:
    """Smallest lasso lambda at which every weight is zero."""
    X, y = check_Xy(X, y)
    return float(np.max(np.abs(X.T @ (y - y.mean()))) / X.shape[0])


def save_model(m: LinearModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_dict(), fh, indent=2)


def load_model(path) -> LinearModel:
    with open(path) as fh:
        return LinearModel.from_dict(json.load(fh))
