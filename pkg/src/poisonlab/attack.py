"""Gradient-ascent poisoning of regularized linear learners.

The attacker moves ``q`` labelled points inside a feasible box so as to
maximize the learner's regularized loss on reference data,

    W = (1/m) sum_j 1/2 (f(x_j) - y_j)^2 + lam * Omega(w),

where (w, b) is refit on the reference data plus the current attack points.
The gradient of W with respect to an attack point goes through the trained
parameters; dw/dx_c and db/dx_c come from differentiating the learner's
stationarity conditions (holding the lasso active set fixed).  An optional
outlier-evasion penalty trades attack strength for detectability:

* ``distance_threshold``: steps that would leave the ball of radius ``d_att``
  around the nearest reference point are rejected.
* ``knn_power``: ``phi * |x_c - x_k|^P`` is subtracted from W, with ``x_k``
  the k-th nearest reference point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted, check_point, check_Xy
from .data import Dataset
from .exceptions import ConvergenceWarning, DataError, NumericalError
from .linmod import GramStats, LinearModel, Regularizer

__all__ = [
    "FeasibleDomain",
    "PenaltyTerm",
    "AttackConfig",
    "AttackTrace",
    "ImplicitGradients",
    "PoisoningAttack",
    "attacker_objective",
    "implicit_gradients",
    "objective_gradient",
    "penalty_value",
    "penalty_gradient",
    "project",
    "nearest_distance",
    "poison",
]


# ---------------------------------------------------------------------------
# Feasible domain


@dataclass(frozen=True)
class FeasibleDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError("need lower <= upper componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    @classmethod
    def from_data(cls, X, margin: float = 0.1) -> FeasibleDomain:
        """Per-feature [min - margin * range, max + margin * range]."""
        X = np.asarray(X, dtype=float)
        lo, hi = X.min(axis=0), X.max(axis=0)
        pad = margin * (hi - lo)
        return cls(lo - pad, hi + pad)

    @classmethod
    def box(cls, d: int, low: float, high: float) -> FeasibleDomain:
        return cls(np.full(d, float(low)), np.full(d, float(high)))

    def intersect(self, other: FeasibleDomain) -> FeasibleDomain:
        return FeasibleDomain(np.maximum(self.lower, other.lower), np.minimum(self.upper, other.upper))

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def on_border(self, x, atol: float = 1e-6) -> bool:
        """True when some coordinate sits on a (finite) face of the box."""
        x = np.asarray(x)
        span = np.where(np.isfinite(self.upper - self.lower), self.upper - self.lower, 1.0)
        tol = atol * np.maximum(span, 1.0)
        return bool(np.any(np.abs(x - self.lower) <= tol) or np.any(np.abs(x - self.upper) <= tol))

    def to_dict(self) -> dict:
        return {"lower": [float(v) for v in self.lower], "upper": [float(v) for v in self.upper]}


def project(domain: FeasibleDomain, x) -> np.ndarray:
    """Componentwise clip of ``x`` onto the box."""
    return np.clip(np.asarray(x, dtype=float), domain.lower, domain.upper)


# ---------------------------------------------------------------------------
# Outlier-evasion penalties

PENALTY_KINDS = ("none", "distance_threshold", "knn_power")


@dataclass(frozen=True)
class PenaltyTerm:
    kind: str = "none"
    d_att: float = 1.0
    phi: float = 0.0
    k: int = 1
    P: float = 2.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty {self.kind!r}; choose from {PENALTY_KINDS}")
        if self.kind == "distance_threshold" and not self.d_att >= 0.0:
            raise ValueError(f"d_att must be non-negative, got {self.d_att}")
        if self.kind == "knn_power":
            if int(self.k) < 1 or self.P < 1.0 or self.phi < 0.0:
                raise ValueError("knn_power needs k >= 1, P >= 1 and phi >= 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_att": self.d_att, "phi": self.phi, "k": int(self.k), "P": self.P}


def _ref_features(ref):
    return ref.features if isinstance(ref, Dataset) else np.asarray(ref, dtype=float)


def _neighbor(x, R, k):
    """Index and distance of the k-th nearest row of R (smallest index wins ties)."""
    dist = np.sqrt(((R - x) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    i = order[k - 1]
    return i, dist[i]


def nearest_distance(x, ref) -> float:
    R = _ref_features(ref)
    if R.shape[0] == 0:
        raise DataError("reference set is empty")
    return float(np.sqrt(((R - np.asarray(x, dtype=float)) ** 2).sum(axis=1)).min())


def penalty_value(pen: PenaltyTerm, x_c, ref) -> float:
    """Outlier penalty Lambda(x_c); ``inf`` outside the distance-threshold ball."""
    R = _ref_features(ref)
    if R.shape[0] == 0:
        raise DataError("reference set is empty")
    if pen.kind == "none":
        return 0.0
    x = np.asarray(x_c, dtype=float)
    if pen.kind == "distance_threshold":
        return 0.0 if nearest_distance(x, R) <= pen.d_att else np.inf
    if pen.k > R.shape[0]:
        raise DataError(f"k={pen.k} exceeds the {R.shape[0]} reference points")
    _, dist = _neighbor(x, R, int(pen.k))
    return float(dist**pen.P)


def penalty_gradient(pen: PenaltyTerm, x_c, ref, return_flag: bool = False):
    """Gradient of Lambda at ``x_c``.

    For ``knn_power`` this is ``P |x_c - x_k|^(P-2) (x_c - x_k)``; when
    ``P < 2`` and ``x_c`` coincides with ``x_k`` the gradient is singular and
    a zero vector is returned with the flag set.
    """
    x = np.asarray(x_c, dtype=float)
    grad = np.zeros_like(x)
    singular = False
    if pen.kind == "knn_power":
        R = _ref_features(ref)
        if pen.k > R.shape[0]:
            raise DataError(f"k={pen.k} exceeds the {R.shape[0]} reference points")
        i, dist = _neighbor(x, R, int(pen.k))
        diff = x - R[i]
        if dist == 0.0:
            singular = pen.P < 2.0
        else:
            grad = pen.P * dist ** (pen.P - 2.0) * diff
    return (grad, singular) if return_flag else grad


# ---------------------------------------------------------------------------
# Attacker objective and its gradient


def attacker_objective(ref, model: LinearModel) -> float:
    """Regularized squared loss of ``model`` on the reference data."""
    if isinstance(ref, Dataset):
        X, y = ref.features, ref.labels
    else:
        X, y = ref
    X, y = check_Xy(X, y, n_features=model.n_features_in_)
    r = X @ model.coef_ + model.intercept_ - y
    return 0.5 * float(r @ r) / X.shape[0] + model.lam * model.regularizer.value(model.coef_)


class ImplicitGradients(NamedTuple):
    dw: np.ndarray  # (d, d): dw[j, k] = d w_j / d x_c[k]
    db: np.ndarray  # (d,)
    singular: bool


def _as_stats(train):
    if isinstance(train, GramStats):
        return train
    if isinstance(train, Dataset):
        return GramStats.from_data(train.features, train.labels)
    X, y = train
    return GramStats.from_data(X, y)


def implicit_gradients(model: LinearModel, train_with_attack, x_c, y_c) -> ImplicitGradients:
    """Sensitivities of the fitted (w, b) to the training point ``(x_c, y_c)``.

    ``train_with_attack`` is the full training set the model was fit on (a
    Dataset, an ``(X, y)`` pair or a :class:`GramStats`), including ``x_c``.
    Differentiating the stationarity conditions on the active set A gives

        [S_AA + lam*l2*I   m_A] [dw_A]      1 [x_c[A] w^T + (f(x_c) - y_c) I_A]
        [m_A^T             1  ] [db  ] = - --- [w^T                           ]
                                            n

    with S the uncentered second moment and m the mean of the training
    inputs.  Inactive lasso coordinates keep zero derivative.
    """
    check_is_fitted(model, "coef_")
    stats = _as_stats(train_with_attack)
    d = model.n_features_in_
    x = check_point(x_c, d)
    reg = model.regularizer
    w, b = model.coef_, model.intercept_
    n = stats.n
    active = np.flatnonzero(w != 0.0) if reg.l1 > 0.0 else np.arange(d)
    a = active.shape[0]
    H = np.empty((a + 1, a + 1))
    H[:a, :a] = stats.sxx[np.ix_(active, active)] / n + model.lam * reg.l2 * np.eye(a)
    H[:a, a] = H[a, :a] = stats.sx[active] / n
    H[a, a] = 1.0
    rhs = np.zeros((a + 1, d))
    resid = float(x @ w + b - y_c)
    rhs[:a] = np.outer(x[active], w)
    rhs[np.arange(a), active] += resid
    rhs[a] = w
    rhs *= -1.0 / n
    singular = False
    try:
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        Z = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        singular = True
        Z = np.linalg.lstsq(H, rhs, rcond=None)[0]
    dw = np.zeros((d, d))
    dw[active] = Z[:a]
    return ImplicitGradients(dw, Z[a].copy(), singular)


def _ref_loss_gradient(model, ref_stats):
    """(1/m) X^T e and mean(e), e = f(X) - y, from reference statistics."""
    w, b, m = model.coef_, model.intercept_, ref_stats.n
    g_w = (ref_stats.sxx @ w + ref_stats.sx * b - ref_stats.sxy) / m
    g_b = (ref_stats.sx @ w + m * b - ref_stats.sy) / m
    return g_w, g_b


def _assemble(model, ref_stats, ig):
    g_w, g_b = _ref_loss_gradient(model, ref_stats)
    coef = g_w + model.lam * model.regularizer.subgradient(model.coef_)
    return coef @ ig.dw + g_b * ig.db


def objective_gradient(cfg: AttackConfig, points, c: int, labels=None, model: LinearModel | None = None):
    """dW/dx_c for attack point ``c`` given the current attack points.

    Refits the learner on reference plus ``points`` unless a fitted ``model``
    is supplied.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = cfg.resolved_labels() if labels is None else np.asarray(labels, dtype=float)
    ref_stats = GramStats.from_data(cfg.reference.features, cfg.reference.labels)
    stats = ref_stats.copy()
    for x, y in zip(points, labels):
        stats.add(x, y)
    if model is None:
        model = cfg.learner().fit_gram(stats)
    ig = implicit_gradients(model, stats, points[c], labels[c])
    return _assemble(model, ref_stats, ig)


# ---------------------------------------------------------------------------
# Configuration and trace


@dataclass(frozen=True)
class AttackConfig:
    """Inputs to :func:`poison`.

    ``reference`` is the attacker's view of the training data: the true
    training set under perfect knowledge, or a surrogate drawn from the same
    distribution.  When ``initial_points`` is omitted, ``q`` reference points
    are drawn without replacement (seeded) and their labels flipped.
    """

    reference: Dataset
    q: int = 1
    knowledge: str = "perfect"
    initial_points: np.ndarray | None = None
    labels: np.ndarray | None = None
    step_size: float = 0.05
    steps: int = 200
    normalize: bool = True
    lam: float = 0.1
    reg: str = "lasso"
    rho: float = 0.5
    domain: FeasibleDomain | None = None
    penalty: PenaltyTerm = field(default_factory=PenaltyTerm)
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 10_000

    def __post_init__(self):
        if self.knowledge not in ("perfect", "surrogate"):
            raise ValueError(f"knowledge must be 'perfect' or 'surrogate', got {self.knowledge!r}")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must lie in (0, 1] so that steps stay inside the box")
        if int(self.steps) < 0:
            raise ValueError("steps must be non-negative")
        if int(self.q) < 1:
            raise ValueError("q must be at least 1")
        if self.initial_points is None and self.q > self.reference.n:
            raise ValueError("q exceeds the number of reference points available for initialization")
        Regularizer(self.reg, self.rho)
        if self.penalty.kind == "knn_power" and self.penalty.k > self.reference.n:
            raise ValueError("penalty k exceeds the reference set size")
        if self.domain is not None and self.domain.d != self.reference.d:
            raise ValueError("domain dimension does not match the reference data")

    def learner(self) -> LinearModel:
        return LinearModel(lam=self.lam, reg=self.reg, rho=self.rho, tol=self.tol, max_iter=self.max_iter)

    def resolved_domain(self) -> FeasibleDomain:
        return self.domain if self.domain is not None else FeasibleDomain.from_data(self.reference.features)

    def _init_draw(self):
        rng = np.random.default_rng(self.seed)
        return rng.choice(self.reference.n, size=int(self.q), replace=False)

    def resolved_initial_points(self) -> np.ndarray:
        if self.initial_points is not None:
            pts = np.atleast_2d(np.asarray(self.initial_points, dtype=float))
            if pts.shape != (self.q, self.reference.d):
                raise ValueError(f"initial_points must have shape ({self.q}, {self.reference.d})")
            return pts.copy()
        return self.reference.features[self._init_draw()].copy()

    def resolved_labels(self) -> np.ndarray:
        if self.labels is not None:
            y = np.atleast_1d(np.asarray(self.labels, dtype=float))
            if y.shape != (self.q,) or not np.all(np.abs(y) == 1.0):
                raise ValueError("labels must be q values in {-1, +1}")
            return y
        if self.initial_points is not None:
            raise ValueError("labels are required when initial_points are given")
        return -self.reference.labels[self._init_draw()]

    def to_dict(self) -> dict:
        return {
            "q": int(self.q),
            "knowledge": self.knowledge,
            "step_size": self.step_size,
            "steps": int(self.steps),
            "normalize": bool(self.normalize),
            "lam": self.lam,
            "reg": self.reg,
            "rho": self.rho,
            "penalty": self.penalty.to_dict(),
            "domain": self.resolved_domain().to_dict(),
            "seed": int(self.seed),
            "tol": self.tol,
            "max_iter": int(self.max_iter),
            "reference_n": self.reference.n,
        }


@dataclass
class AttackTrace:
    """Per-step record of a poisoning run.

    Arrays are indexed by step ``t = 0..steps`` (and attack point ``c``):
    ``positions[t, c]`` is x_c^t, ``objective[t]`` is W with the learner fit
    on the points at step t, ``penalized[t, c]`` is W - phi * Lambda(x_c^t),
    ``grad_norm[t, c]`` is the norm of the ascent direction used to reach
    step t (NaN at t = 0) and ``rejected[t, c]`` marks steps refused by the
    distance-threshold wall.
    """

    positions: np.ndarray
    labels: np.ndarray
    objective: np.ndarray
    penalized: np.ndarray
    grad_norm: np.ndarray
    rejected: np.ndarray
    kkt: np.ndarray
    flags: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    final_model: LinearModel | None = None

    @property
    def final_points(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def steps(self) -> int:
        return self.positions.shape[0] - 1

    def rows(self):
        q, d = self.positions.shape[1:]
        for t in range(self.positions.shape[0]):
            for c in range(q):
                yield [t, c, *self.positions[t, c], self.objective[t], self.penalized[t, c],
                       self.grad_norm[t, c], int(self.rejected[t, c])]

    def header(self) -> list[str]:
        d = self.positions.shape[2]
        return ["t", "c", *[f"x{j + 1}" for j in range(d)], "W", "W_penalized", "grad_norm", "rejected"]

    def to_csv(self, path) -> None:
        from .io import write_csv

        write_csv(path, self.header(), self.rows())

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "q": int(self.positions.shape[1]),
            "labels": [float(v) for v in self.labels],
            "initial_points": self.positions[0].tolist(),
            "final_points": self.final_points.tolist(),
            "W_initial": float(self.objective[0]),
            "W_final": float(self.objective[-1]),
            "rejected_steps": int(self.rejected.sum()),
            "max_kkt_residual": float(np.nanmax(self.kkt)),
            "flags": list(self.flags),
            "config": self.config,
        }

    def to_json(self, path) -> None:
        from .io import write_json

        write_json(path, self.summary())


# ---------------------------------------------------------------------------
# Algorithm


def _kkt_from_stats(model, stats):
    w, b, n = model.coef_, model.intercept_, stats.n
    grad = (stats.sxx @ w + stats.sx * b - stats.sxy) / n
    reg = model.regularizer
    active = w != 0.0
    res = np.where(active, np.abs(grad + model.lam * reg.subgradient(w)),
                   np.maximum(np.abs(grad) - model.lam * reg.l1, 0.0))
    bias = abs((stats.sx @ w + n * b - stats.sy) / n)
    return float(max(res.max(initial=0.0), bias))


def poison(cfg: AttackConfig) -> AttackTrace:
    """Fixed-step projected gradient ascent on the attack points.

    At every step the learner is refit on the reference data plus all attack
    points from the previous step; each point then moves by
    ``step_size * (project(x + grad) - x)`` where ``grad`` is the ascent
    direction of the (penalized) attacker objective, scaled to unit length
    when ``cfg.normalize`` is set.  The raw gradient shrinks like 1/n, so the
    unnormalized rule barely moves on realistic sample sizes.
    """
    domain = cfg.resolved_domain()
    pen = cfg.penalty
    R = cfg.reference.features
    X0 = cfg.resolved_initial_points()
    y_c = cfg.resolved_labels()
    for x in X0:
        if not domain.contains(x, atol=1e-12):
            raise ValueError("initial attack point lies outside the feasible domain")
    q, d = X0.shape
    T = int(cfg.steps)

    positions = np.empty((T + 1, q, d))
    positions[0] = X0
    objective = np.empty(T + 1)
    penalized = np.empty((T + 1, q))
    grad_norm = np.full((T + 1, q), np.nan)
    rejected = np.zeros((T + 1, q), dtype=bool)
    kkt = np.empty(T + 1)
    flags: list[str] = []
    frozen = np.zeros(q, dtype=bool)

    ref_stats = GramStats.from_data(R, cfg.reference.labels)
    model = cfg.learner()
    w_prev = None

    def refit(points):
        nonlocal w_prev
        stats = ref_stats.copy()
        for x, y in zip(points, y_c):
            stats.add(x, y)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            model.fit_gram(stats, w0=w_prev)
        w_prev = model.coef_.copy()
        return stats, any(issubclass(c.category, ConvergenceWarning) for c in caught)

    def record(t, stats, unconverged):
        objective[t] = attacker_objective((R, cfg.reference.labels), model)
        kkt[t] = _kkt_from_stats(model, stats)
        if unconverged:
            flags.append(f"t={t}: learner did not converge")
        for c in range(q):
            lam_c = 0.0
            if pen.kind == "knn_power":
                lam_c = pen.phi * penalty_value(pen, positions[t, c], R)
            elif pen.kind == "distance_threshold":
                lam_c = 0.0 if nearest_distance(positions[t, c], R) <= pen.d_att else np.inf
            penalized[t, c] = objective[t] - lam_c

    stats, unconv = refit(positions[0])
    record(0, stats, unconv)
    for t in range(1, T + 1):
        current = positions[t - 1]
        for c in range(q):
            x = current[c]
            if frozen[c]:
                positions[t, c] = x
                continue
            try:
                ig = implicit_gradients(model, stats, x, y_c[c])
                if ig.singular:
                    flags.append(f"t={t} c={c}: singular implicit system, least-squares fallback")
                grad = _assemble(model, ref_stats, ig)
                if pen.kind == "knn_power" and pen.phi > 0.0:
                    g_pen, sing = penalty_gradient(pen, x, R, return_flag=True)
                    if sing:
                        flags.append(f"t={t} c={c}: singular knn penalty gradient")
                    grad = grad - pen.phi * g_pen
                if not np.all(np.isfinite(grad)):
                    raise NumericalError("non-finite attack gradient")
            except (NumericalError, np.linalg.LinAlgError) as exc:
                flags.append(f"t={t} c={c}: {exc}; point frozen")
                frozen[c] = True
                positions[t, c] = x
                continue
            gnorm = float(np.linalg.norm(grad))
            grad_norm[t, c] = gnorm
            if cfg.normalize and gnorm > 0.0:
                grad = grad / gnorm
            direction = project(domain, x + grad) - x
            x_new = x + cfg.step_size * direction
            if pen.kind == "distance_threshold" and nearest_distance(x_new, R) > pen.d_att:
                rejected[t, c] = True
                x_new = x
            positions[t, c] = x_new
        stats, unconv = refit(positions[t])
        record(t, stats, unconv)

    final = LinearModel(**model.get_params())
    final.coef_, final.intercept_ = model.coef_.copy(), model.intercept_
    final.n_features_in_, final.n_iter_, final.converged_ = d, model.n_iter_, model.converged_
    final.classes_ = model.classes_
    return AttackTrace(positions, y_c, objective, penalized, grad_norm, rejected, kkt, flags,
                       cfg.to_dict(), final)


# ---------------------------------------------------------------------------
# Estimator front end


class PoisoningAttack(BaseEstimator):
    """Estimator-style wrapper around :func:`poison`.

    ``fit(X, y)`` treats (X, y) as the attacker's reference data, runs the
    attack and stores ``attack_points_``, ``attack_labels_`` and ``trace_``.
    ``transform`` returns the poisoned training set (reference rows followed
    by the attack points).
    """

    def __init__(self, n_points=1, step_size=0.05, n_steps=200, normalize=True, lam=0.1, reg="lasso", rho=0.5,
                 penalty="none", d_att=1.0, phi=0.0, k=1, P=2.0, bounds=None, margin=0.1,
                 knowledge="perfect", random_state=0):
        self.n_points = n_points
        self.step_size = step_size
        self.n_steps = n_steps
        self.normalize = normalize
        self.lam = lam
        self.reg = reg
        self.rho = rho
        self.penalty = penalty
        self.d_att = d_att
        self.phi = phi
        self.k = k
        self.P = P
        self.bounds = bounds
        self.margin = margin
        self.knowledge = knowledge
        self.random_state = random_state

    def _config(self, ref: Dataset) -> AttackConfig:
        if self.bounds is None:
            domain = FeasibleDomain.from_data(ref.features, self.margin)
        else:
            lo, hi = self.bounds
            domain = FeasibleDomain(np.broadcast_to(lo, ref.d), np.broadcast_to(hi, ref.d))
        return AttackConfig(
            reference=ref, q=self.n_points, knowledge=self.knowledge, step_size=self.step_size,
            steps=self.n_steps, normalize=self.normalize, lam=self.lam, reg=self.reg, rho=self.rho, domain=domain,
            penalty=PenaltyTerm(self.penalty, self.d_att, self.phi, self.k, self.P),
            seed=self.random_state,
        )

    def fit(self, X, y):
        X, y = check_Xy(X, y)
        ref = Dataset(X, y, tuple(f"x{j}" for j in range(X.shape[1])))
        self.trace_ = poison(self._config(ref))
        self.attack_points_ = self.trace_.final_points.copy()
        self.attack_labels_ = self.trace_.labels.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, y):
        check_is_fitted(self, "trace_")
        X, y = check_Xy(X, y, n_features=self.n_features_in_)
        return np.vstack([X, self.attack_points_]), np.concatenate([y, self.attack_labels_])
