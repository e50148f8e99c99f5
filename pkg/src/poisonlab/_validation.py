"""Input validation helpers used by the estimators."""

import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .exceptions import DataError

__all__ = ["check_X", "check_Xy", "check_point", "check_labels", "check_is_fitted", "NotFittedError"]


def check_X(X, *, n_features=None, min_samples=1):
    try:
        X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if n_features is not None and X.shape[1] != n_features:
        raise DataError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_labels(y, n_samples=None):
    y = np.asarray(y, dtype=np.float64).ravel()
    if n_samples is not None and y.shape[0] != n_samples:
        raise DataError(f"got {y.shape[0]} labels for {n_samples} samples")
    if not np.all((y == 1.0) | (y == -1.0)):
        raise DataError("labels must be -1 or +1")
    return y


def check_Xy(X, y, *, n_features=None, min_samples=1):
    X = check_X(X, n_features=n_features, min_samples=min_samples)
    return X, check_labels(y, X.shape[0])


def check_point(x, n_features):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n_features:
        raise DataError(f"expected a point of dimension {n_features}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("point contains non-finite values")
    return x


def check_is_fitted(estimator, attribute):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")
