"""Dataset container, CSV/UCI ingestion, standardization, splitting and the toy generator."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_is_fitted, check_labels, check_X
from .exceptions import DataError

__all__ = [
    "Dataset",
    "CsvSchema",
    "Standardizer",
    "GaussianToyConfig",
    "UCI_DATASETS",
    "load_csv",
    "load_uci",
    "default_data_dir",
    "raw_bounds",
    "fit_standardizer",
    "apply_standardizer",
    "split",
    "gen_gaussian_toy",
    "toy_config",
]


@dataclass(frozen=True)
class Dataset:
    """Labelled feature matrix with labels in {-1, +1}.

    ``row_ids`` records the originating row of every sample so that splits
    and subsets can be traced back to the source file.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    row_ids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        X = check_X(self.features)
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        y = check_labels(self.labels, X.shape[0])
        names = tuple(str(s) for s in self.feature_names)
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} features")
        ids = np.arange(X.shape[0]) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        if ids.shape != (X.shape[0],):
            raise DataError("row_ids must have one entry per sample")
        for arr in (X, y, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "row_ids", ids)

    @property
    def X(self) -> np.ndarray:
        return self.features

    @property
    def y(self) -> np.ndarray:
        return self.labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.feature_names, self.row_ids[idx])

    def with_features(self, X) -> Dataset:
        return Dataset(X, self.labels, self.feature_names, self.row_ids)

    def append(self, X, y) -> Dataset:
        """Return a new dataset with extra rows; appended rows get ids ``-1, -2, ...``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        ids = -np.arange(1, X.shape[0] + 1)
        return Dataset(
            np.vstack([self.features, X]),
            np.concatenate([self.labels, y]),
            self.feature_names,
            np.concatenate([self.row_ids, ids]),
        )


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`.

    Columns may be referenced by zero-based index or by name.  Names come from
    the header row when ``header`` is true, otherwise from ``names`` (or
    ``x0, x1, ...`` when neither is given).  ``value_map`` rewrites raw cell
    strings before numeric parsing and takes precedence over the missing-value
    marker, so ``{"?": 0.5}`` keeps rows that would otherwise be dropped.
    """

    label: int | str
    categorical: tuple[int | str, ...] = ()
    positive_label: str | None = None
    header: bool = False
    names: tuple[str, ...] | None = None
    missing: str = "?"
    value_map: Mapping[str, float] | None = None


def _resolve(ref, names):
    if isinstance(ref, (int, np.integer)):
        if not 0 <= ref < len(names):
            raise DataError(f"column index {ref} out of range for {len(names)} columns")
        return int(ref)
    try:
        return names.index(ref)
    except ValueError:
        raise DataError(f"unknown column {ref!r}") from None


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read a comma-separated file into a :class:`Dataset`.

    Rows containing the missing-value marker (after ``value_map``) are
    dropped, categorical columns are one-hot encoded in place with categories
    in sorted order, and the label column is mapped onto {-1, +1}.
    """
    try:
        with open(path, newline="") as fh:
            rows = [[c.strip() for c in r] for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if schema.header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names, rows = rows[0], rows[1:]
    elif schema.names is not None:
        names = list(schema.names)
    else:
        names = [f"x{i}" for i in range(len(rows[0]))] if rows else []
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(names)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {width}")

    label_col = _resolve(schema.label, names)
    cat_cols = {_resolve(c, names) for c in schema.categorical}
    if label_col in cat_cols:
        raise DataError("label column cannot also be categorical")
    vmap = dict(schema.value_map or {})

    kept, kept_ids = [], []
    for i, r in enumerate(rows):
        cells = [r[j] if (j == label_col or j in cat_cols) else vmap.get(r[j], r[j]) for j in range(width)]
        if any(isinstance(c, str) and c == schema.missing for c in cells):
            continue
        kept.append(cells)
        kept_ids.append(i)
    if not kept:
        raise DataError(f"{path}: every row contains missing values")

    raw_labels = [r[label_col] for r in kept]
    classes = sorted(set(raw_labels))
    if len(classes) > 2:
        raise DataError(f"label column has {len(classes)} distinct values, expected at most 2")
    positive = schema.positive_label if schema.positive_label is not None else classes[-1]
    if positive not in classes and len(classes) == 2:
        raise DataError(f"positive label {positive!r} not among {classes}")
    y = np.array([1.0 if v == positive else -1.0 for v in raw_labels])

    columns, feat_names = [], []
    for j in range(width):
        if j == label_col:
            continue
        if j in cat_cols:
            values = [r[j] for r in kept]
            for cat in sorted(set(values)):
                columns.append(np.array([1.0 if v == cat else 0.0 for v in values]))
                feat_names.append(f"{names[j]}={cat}")
        else:
            try:
                columns.append(np.array([float(r[j]) for r in kept]))
            except ValueError as exc:
                raise DataError(f"{path}: non-numeric entry in column {names[j]!r}: {exc}") from exc
            feat_names.append(names[j])
    if not columns:
        raise DataError(f"{path}: no feature columns")
    X = np.column_stack(columns)
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature values")
    return Dataset(X, y, tuple(feat_names), np.array(kept_ids))


# ---------------------------------------------------------------------------
# UCI presets

_SPAM_WORDS = (
    "make address all 3d our over remove internet order mail receive will people report "
    "addresses free business email you credit your font 000 money hp hpl george 650 lab "
    "labs telnet 857 data 415 85 technology 1999 parts pm direct cs meeting original "
    "project re edu table conference"
).split()
_SPAM_NAMES = (
    tuple(f"word_freq_{w}" for w in _SPAM_WORDS)
    + tuple(f"char_freq_{c}" for c in ";([!$#")
    + ("capital_run_length_average", "capital_run_length_longest", "capital_run_length_total", "spam")
)
_VOTE_ISSUES = (
    "handicapped-infants water-project-cost-sharing adoption-of-the-budget-resolution "
    "physician-fee-freeze el-salvador-aid religious-groups-in-schools anti-satellite-test-ban "
    "aid-to-nicaraguan-contras mx-missile immigration synfuels-corporation-cutback "
    "education-spending superfund-right-to-sue crime duty-free-exports "
    "export-administration-act-south-africa"
).split()

UCI_DATASETS: dict[str, tuple[str, CsvSchema]] = {
    "spambase": (
        "spambase.data",
        CsvSchema(label="spam", names=_SPAM_NAMES, positive_label="1"),
    ),
    "credit-approval": (
        "crx.data",
        CsvSchema(
            label="A16",
            names=tuple(f"A{i}" for i in range(1, 17)),
            categorical=("A1", "A4", "A5", "A6", "A7", "A9", "A10", "A12", "A13"),
            positive_label="+",
        ),
    ),
    "congressional-voting": (
        "house-votes-84.data",
        CsvSchema(
            label="party",
            names=("party", *_VOTE_ISSUES),
            positive_label="democrat",
            value_map={"y": 1.0, "n": 0.0, "?": 0.5},
        ),
    ),
}


def default_data_dir() -> Path:
    """``$POISONLAB_DATA_DIR`` if set, else the copies bundled with the package."""
    env = os.environ.get("POISONLAB_DATA_DIR")
    return Path(env) if env else Path(__file__).parent / "_data"


def load_uci(name: str, data_dir=None) -> Dataset:
    """Load one of the three UCI datasets, unnormalized."""
    if name not in UCI_DATASETS:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(UCI_DATASETS)}")
    filename, schema = UCI_DATASETS[name]
    path = Path(data_dir) if data_dir is not None else default_data_dir()
    path = path / filename
    if not path.is_file():
        raise DataError(f"raw file for {name!r} not found at {path}")
    return load_csv(path, schema)


def raw_bounds(name: str, d: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Natural feature bounds in raw units, or None when the data has none.

    Spambase percentages live in [0, 100]; the three capital-run statistics
    are only bounded below.
    """
    if name != "spambase":
        return None
    lower = np.zeros(d)
    upper = np.full(d, np.inf)
    upper[:54] = 100.0
    return lower, upper


# ---------------------------------------------------------------------------
# Standardization


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-feature z-scoring with the population (ddof=0) standard deviation.

    Constant features keep ``scale_ = 1`` so they map to all zeros.
    """

    def fit(self, X, y=None):
        X = check_X(X)
        # exact check: the float mean of identical values can be off by an ulp
        constant = np.ptp(X, axis=0) == 0.0
        self.mean_ = np.where(constant, X[0], X.mean(axis=0))
        std = X.std(axis=0)
        self.scale_ = np.where(constant | (std == 0.0), 1.0, std)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_X(X, n_features=self.n_features_in_)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_X(X, n_features=self.n_features_in_)
        return X * self.scale_ + self.mean_

    def transform_bounds(self, lower, upper):
        """Map raw box bounds into standardized units (infinities preserved)."""
        check_is_fitted(self, "mean_")
        with np.errstate(invalid="ignore"):
            lo = (np.asarray(lower, dtype=float) - self.mean_) / self.scale_
            hi = (np.asarray(upper, dtype=float) - self.mean_) / self.scale_
        return lo, hi


def fit_standardizer(d: Dataset) -> Standardizer:
    return Standardizer().fit(d.features)


def apply_standardizer(s: Standardizer, d: Dataset) -> Dataset:
    return d.with_features(s.transform(d.features))


# ---------------------------------------------------------------------------
# Splitting


def split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, test) with ``round(n * train_fraction)`` training rows."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(d.n * train_fraction))
    if n_train < 1 or n_train >= d.n:
        raise DataError(f"train_fraction {train_fraction} leaves an empty split for n={d.n}")
    perm = np.random.default_rng(seed).permutation(d.n)
    return d.subset(np.sort(perm[:n_train])), d.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# Toy Gaussian data

# Class-mean separation in units of the per-class standard deviation.  At
# 3.6 the clean LASSO (lambda = 0.1) averages 96.0% accuracy over the 50
# toy draws of the threshold-game experiment at master seed 0
# (``harness.calibrate_toy_separation`` returns 3.605).
TOY_SEPARATION = 3.6
# Per-class standard deviation.  Clean accuracy does not depend on it, but
# the damage one point can do inside a ball of fixed radius does; at 0.45
# the undefended attack with d_att = 10 brings accuracy to 87.6%
# (``harness.calibrate_toy_scale``).
TOY_SCALE = 0.45


@dataclass(frozen=True)
class GaussianToyConfig:
    """Two 2-D Gaussian classes; ``means[0]`` is labelled -1 and ``means[1]`` +1."""

    means: tuple[tuple[float, float], tuple[float, float]]
    cov: tuple[tuple[float, float], tuple[float, float]]
    samples_per_class: int
    seed: int

    def __post_init__(self):
        m = np.asarray(self.means, dtype=float)
        c = np.asarray(self.cov, dtype=float)
        if m.shape != (2, 2) or c.shape != (2, 2):
            raise DataError("means must be 2x2 and cov 2x2")
        if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
            raise DataError("covariance must be symmetric positive definite")
        if int(self.samples_per_class) < 1:
            raise DataError("samples_per_class must be positive")


def toy_config(seed: int, samples_per_class: int = 25, separation: float | None = None,
               scale: float | None = None) -> GaussianToyConfig:
    """Isotropic classes at ``(+-separation/2, 0) * scale`` with covariance ``scale**2 * I``."""
    sep = TOY_SEPARATION if separation is None else separation
    s = TOY_SCALE if scale is None else scale
    return GaussianToyConfig(
        means=((-sep / 2 * s, 0.0), (sep / 2 * s, 0.0)),
        cov=((s * s, 0.0), (0.0, s * s)),
        samples_per_class=samples_per_class,
        seed=seed,
    )


def gen_gaussian_toy(cfg: GaussianToyConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    k = int(cfg.samples_per_class)
    chol = np.linalg.cholesky(np.asarray(cfg.cov, dtype=float))
    parts = [np.asarray(mu, dtype=float) + rng.standard_normal((k, 2)) @ chol.T for mu in cfg.means]
    X = np.vstack(parts)
    y = np.concatenate([-np.ones(k), np.ones(k)])
    perm = rng.permutation(2 * k)
    return Dataset(X[perm], y[perm], ("x1", "x2"))


def stack(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate datasets that share feature names."""
    first = datasets[0]
    return Dataset(
        np.vstack([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        first.feature_names,
        np.concatenate([d.row_ids for d in datasets]),
    )
