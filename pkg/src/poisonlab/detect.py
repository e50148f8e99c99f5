"""Novelty and outlier scoring for incoming training points.

Four detectors share one interface: ``fit`` on clean training data, then
``score_samples`` returns a real score per query point where higher means
more outlying.

``DistanceThreshold``
    Euclidean distance to the nearest training point; a point is discarded
    when the distance exceeds ``d_def``.
``OneClassSVM``
    RBF one-class SVM solved in the dual by pairwise (SMO) updates.  The
    score is the negated decision value, ``rho - sum_i alpha_i k(x_i, x)``.
``IsolationForest``
    Random axis-aligned isolation trees; the score ``2^(-E[h(x)] / c(psi))``
    is close to 1 for points isolated after few splits.
``LocalOutlierFactor``
    Ratio of the neighbors' local reachability density to the query's own,
    with tie-inclusive k-neighborhoods.  Queries are scored against the
    training set only (novelty mode).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import digamma
from sklearn.base import BaseEstimator, OutlierMixin

from ._validation import check_is_fitted, check_X
from .data import Dataset
from .exceptions import DataError, NumericalError

__all__ = [
    "KINDS",
    "OutlierScorer",
    "DistanceThreshold",
    "OneClassSVM",
    "IsolationForest",
    "LocalOutlierFactor",
    "average_path_length",
    "fit_scorer",
    "score",
    "rank",
    "filter_points",
    "score_table",
]

KINDS = ("dt", "ocsvm", "iforest", "lof")


def _features(data):
    return data.features if isinstance(data, Dataset) else data


class OutlierScorer(OutlierMixin, BaseEstimator):
    """Common base: subclasses implement ``_fit`` and ``_score``."""

    kind = ""

    def fit(self, X, y=None):
        X = check_X(_features(X))
        self.n_features_in_ = X.shape[1]
        self._fit(X)
        self.fitted_ = True
        return self

    def score_samples(self, X) -> np.ndarray:
        """Outlier score per row; higher means more outlying."""
        check_is_fitted(self, "fitted_")
        X = check_X(_features(X), n_features=self.n_features_in_)
        return self._score(X)

    def threshold(self) -> float:
        """Default cut-off used by :meth:`predict`."""
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        """-1 for points scoring above :meth:`threshold`, +1 otherwise."""
        return np.where(self.score_samples(X) > self.threshold(), -1, 1)

    def summary(self) -> dict:
        check_is_fitted(self, "fitted_")
        return {"kind": self.kind, "params": self.get_params(), "n_train": int(self._n_train),
                **self._summary()}

    def _summary(self) -> dict:
        return {}


class DistanceThreshold(OutlierScorer):
    """Nearest-neighbor distance detector.

    Parameters
    ----------
    d_def : float
        Defender threshold; points farther than this from every training
        point are flagged.
    """

    kind = "dt"

    def __init__(self, d_def=1.0):
        self.d_def = d_def

    def _fit(self, X):
        if not self.d_def >= 0.0:
            raise ValueError("d_def must be non-negative")
        self.reference_ = X.copy()
        self._n_train = X.shape[0]

    def _score(self, X):
        return cdist(X, self.reference_).min(axis=1)

    def threshold(self):
        return float(self.d_def)


class OneClassSVM(OutlierScorer):
    """One-class SVM with an RBF kernel.

    Solves ``min 1/2 a^T K a`` subject to ``0 <= a_i <= 1/(nu n)`` and
    ``sum a = 1`` by repeatedly moving mass between a violating pair, the
    partner chosen for the largest second-order decrease, until the KKT gap
    falls below ``tol``.

    Parameters
    ----------
    nu : float in (0, 1]
    gamma : float or None
        RBF width ``exp(-gamma |x - z|^2)``; ``None`` uses ``1 / d``.
    tol : float
    max_iter : int
    """

    kind = "ocsvm"

    def __init__(self, nu=0.1, gamma=None, tol=1e-6, max_iter=1_000_000):
        self.nu = nu
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter

    def _kernel(self, A, B):
        return np.exp(-self.gamma_ * cdist(A, B, "sqeuclidean"))

    def _fit(self, X):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")
        n = X.shape[0]
        if n < 2:
            raise DataError("one-class SVM needs at least two training points")
        if np.all(X == X[0]):
            raise DataError("one-class SVM is undefined when all training points are identical")
        self.gamma_ = 1.0 / X.shape[1] if self.gamma is None else float(self.gamma)
        K = self._kernel(X, X)
        alpha, n_iter = _smo_one_class(K, 1.0 / (self.nu * n), self.tol, int(self.max_iter))
        self.alpha_ = alpha
        self.rho_ = _one_class_offset(K @ alpha, alpha, 1.0 / (self.nu * n))
        self.n_iter_ = n_iter
        sv = alpha > 0.0
        self.support_vectors_ = X[sv]
        self.dual_coef_ = alpha[sv]
        self.dual_objective_ = 0.5 * float(alpha @ K @ alpha)
        self._n_train = n

    def _score(self, X):
        out = np.empty(X.shape[0])
        for lo in range(0, X.shape[0], 1024):
            out[lo:lo + 1024] = self.rho_ - self._kernel(X[lo:lo + 1024], self.support_vectors_) @ self.dual_coef_
        return out

    def threshold(self):
        return 0.0

    def _summary(self):
        return {"gamma": self.gamma_, "rho": self.rho_, "n_support": int(self.dual_coef_.size),
                "dual_objective": self.dual_objective_, "n_iter": int(self.n_iter_)}


def _smo_one_class(K, C, tol, max_iter):
    n = K.shape[0]
    alpha = np.zeros(n)
    # the relative slack stops 1/C = n from rounding down to n - 1
    full = min(int(math.floor(1.0 / C * (1.0 + 1e-12))), n)
    alpha[:full] = C
    if full < n:
        alpha[full] = min(max(1.0 - C * full, 0.0), C)
    G = K @ alpha
    diag = np.diag(K)
    eps = 1e-12 * C
    it = 0
    for it in range(1, max_iter + 1):
        up = alpha < C - eps  # may still increase
        down = alpha > eps  # may still decrease
        if not (up.any() and down.any()):
            return alpha, it
        i = int(np.argmin(np.where(up, G, np.inf)))
        if G[down].max() - G[i] <= tol:
            return alpha, it
        # second-order choice of the partner: largest guaranteed decrease
        gaps = G - G[i]
        curvs = np.maximum(diag[i] + diag - 2.0 * K[i], 1e-12)
        j = int(np.argmax(np.where(down & (gaps > 0.0), gaps * gaps / curvs, -np.inf)))
        gap = gaps[j]
        curv = diag[i] + diag[j] - 2.0 * K[i, j]
        step = gap / curv if curv > 1e-12 else np.inf
        step = min(step, C - alpha[i], alpha[j])
        alpha[i] += step
        alpha[j] -= step
        G += step * (K[:, i] - K[:, j])
    raise NumericalError(f"SMO did not reach KKT tolerance {tol} in {max_iter} iterations")


def _one_class_offset(G, alpha, C):
    free = (alpha > 1e-12 * C) & (alpha < C * (1 - 1e-12))
    if free.any():
        return float(G[free].mean())
    lo = G[alpha < C].max(initial=-np.inf)
    hi = G[alpha > 0.0].min(initial=np.inf)
    return float(0.5 * (lo + hi))


def average_path_length(n) -> np.ndarray:
    """Expected path length of an unsuccessful BST search, c(n) = 2H(n-1) - 2(n-1)/n."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 1
    m = n[big]
    out[big] = 2.0 * (digamma(m) + np.euler_gamma) - 2.0 * (m - 1.0) / m
    return out


class IsolationForest(OutlierScorer):
    """Isolation forest.

    Parameters
    ----------
    n_trees : int
    subsample : int or None
        Points per tree; ``None`` uses ``min(256, n)``.
    seed : int
        Tree ``t`` draws from ``SeedSequence(seed).spawn`` child ``t``.
    """

    kind = "iforest"

    def __init__(self, n_trees=100, subsample=None, seed=0):
        self.n_trees = n_trees
        self.subsample = subsample
        self.seed = seed

    def _fit(self, X):
        n = X.shape[0]
        psi = min(256, n) if self.subsample is None else int(self.subsample)
        if int(self.n_trees) < 1 or not 1 <= psi <= n:
            raise ValueError("n_trees must be positive and subsample within [1, n]")
        self.psi_ = psi
        self.degenerate_ = bool(np.all(X == X[0]))
        self._n_train = n
        self.trees_ = []
        if self.degenerate_:
            return
        limit = max(1, math.ceil(math.log2(psi))) if psi > 1 else 1
        for child in np.random.SeedSequence(self.seed).spawn(int(self.n_trees)):
            rng = np.random.default_rng(child)
            idx = rng.choice(n, size=psi, replace=False)
            self.trees_.append(_grow_tree(X[idx], rng, limit))

    def _score(self, X):
        if self.degenerate_:
            return np.full(X.shape[0], 0.5)
        depth = np.zeros(X.shape[0])
        for tree in self.trees_:
            depth += _path_length(tree, X)
        return 2.0 ** (-(depth / len(self.trees_)) / float(average_path_length(self.psi_)))

    def threshold(self):
        # scores above one half mean shorter than average isolation paths
        return 0.5

    def _summary(self):
        return {"subsample": self.psi_, "n_trees_built": len(self.trees_)}


def _grow_tree(X, rng, limit):
    """Array-encoded isolation tree: feature, threshold, children, leaf size, depth."""
    feature, thresh, left, right, size, depth = [], [], [], [], [], []
    stack = [(np.arange(X.shape[0]), 0, -1, False)]
    while stack:
        rows, level, parent, is_right = stack.pop()
        node = len(feature)
        if parent >= 0:
            (right if is_right else left)[parent] = node
        feature.append(-1)
        thresh.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(rows.size)
        depth.append(level)
        if rows.size <= 1 or level >= limit:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        j = int(candidates[rng.integers(candidates.size)])
        t = rng.uniform(lo[j], hi[j])
        feature[node], thresh[node] = j, t
        mask = sub[:, j] < t
        stack.append((rows[~mask], level + 1, node, True))
        stack.append((rows[mask], level + 1, node, False))
    return (np.array(feature), np.array(thresh), np.array(left), np.array(right),
            np.array(size), np.array(depth))


def _path_length(tree, X):
    feature, thresh, left, right, size, depth = tree
    node = np.zeros(X.shape[0], dtype=int)
    rows = np.arange(X.shape[0])
    while True:
        inner = feature[node] >= 0
        if not inner.any():
            break
        k = node[inner]
        go_left = X[rows[inner], feature[k]] < thresh[k]
        node[inner] = np.where(go_left, left[k], right[k])
    return depth[node] + average_path_length(size[node])


class LocalOutlierFactor(OutlierScorer):
    """Local outlier factor in novelty mode.

    The k-neighborhood of a point contains every training point no farther
    than its k-th nearest neighbor, so ties can enlarge it.  Local
    reachability densities are clamped at ``1e10`` (mean reachability
    distance ``1e-10``) to keep duplicated points finite.

    Parameters
    ----------
    k : int
        Neighborhood size, capped at ``n - 1``.
    """

    kind = "lof"
    _MIN_REACH = 1e-10

    def __init__(self, k=20):
        self.k = k

    def _fit(self, X):
        n = X.shape[0]
        if int(self.k) < 1:
            raise ValueError("k must be positive")
        if n < 2:
            raise DataError("LOF needs at least two training points")
        self.k_ = min(int(self.k), n - 1)
        self.reference_ = X.copy()
        self.degenerate_ = bool(np.all(X == X[0]))
        self._n_train = n
        D = cdist(X, X)
        np.fill_diagonal(D, np.inf)
        self.k_distance_ = np.sort(D, axis=1)[:, self.k_ - 1]
        self.lrd_ = np.array([self._lrd(D[i], self.k_distance_[i]) for i in range(n)])

    def _lrd(self, dist, kdist):
        nb = np.flatnonzero(dist <= kdist)
        reach = np.sort(np.maximum(self.k_distance_[nb], dist[nb]))
        return 1.0 / max(reach.sum() / nb.size, self._MIN_REACH)

    def _score(self, X):
        out = np.empty(X.shape[0])
        for lo in range(0, X.shape[0], 1024):
            D = cdist(X[lo:lo + 1024], self.reference_)
            if self.degenerate_:
                out[lo:lo + 1024] = D[:, 0]
                continue
            kd = np.sort(D, axis=1)[:, self.k_ - 1]
            for r in range(D.shape[0]):
                nb = np.flatnonzero(D[r] <= kd[r])
                own = self._lrd(D[r], kd[r])
                out[lo + r] = np.sort(self.lrd_[nb]).sum() / nb.size / own
        return out

    def threshold(self):
        return 1.0

    def _summary(self):
        return {"k_effective": self.k_}


_CLASSES = {"dt": DistanceThreshold, "ocsvm": OneClassSVM, "iforest": IsolationForest,
            "lof": LocalOutlierFactor}


# ---------------------------------------------------------------------------
# Functional API


def fit_scorer(kind: str, params: dict | None, train, seed: int = 0) -> OutlierScorer:
    """Build and fit a detector of the given kind; ``seed`` only affects iforest."""
    if kind not in _CLASSES:
        raise ValueError(f"unknown detector {kind!r}; choose from {KINDS}")
    params = dict(params or {})
    if kind == "iforest":
        params.setdefault("seed", seed)
    try:
        scorer = _CLASSES[kind](**params)
    except TypeError as exc:
        raise ValueError(f"invalid parameters for {kind}: {exc}") from exc
    return scorer.fit(_features(train))


def score(s: OutlierScorer, x) -> float:
    return float(s.score_samples(np.atleast_2d(np.asarray(x, dtype=float)))[0])


def rank(s: OutlierScorer, points) -> tuple[np.ndarray, np.ndarray]:
    """Scores and the indices ordering ``points`` by descending score (ties keep input order)."""
    sc = s.score_samples(_features(points))
    return sc, np.argsort(-sc, kind="stable")


def filter_points(s: OutlierScorer, threshold: float | None, points) -> tuple[np.ndarray, np.ndarray]:
    """Indices of kept and rejected points; rejected means score > threshold."""
    thr = s.threshold() if threshold is None else threshold
    bad = s.score_samples(_features(points)) > thr
    return np.flatnonzero(~bad), np.flatnonzero(bad)


def score_table(scorers: dict, points, point_ids) -> list[list]:
    """Rows of (point_id, kind, score, rank) with rank 1 the most outlying."""
    rows = []
    for kind, s in scorers.items():
        sc, order = rank(s, points)
        ranks = np.empty(order.size, dtype=int)
        ranks[order] = np.arange(1, order.size + 1)
        rows.extend([pid, kind, float(sc[i]), int(ranks[i])] for i, pid in enumerate(point_ids))
    return rows
