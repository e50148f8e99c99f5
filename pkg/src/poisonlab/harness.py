"""Seeded experiment runners.

Every run takes a master seed.  Trial seeds are derived by
``trial_seed(master, experiment, *counters)``, i.e. the first word of
``SeedSequence(master, spawn_key=(experiment, *counters))``, so trials are
independent, order-free and reproducible regardless of ``jobs``.

Runners return an :class:`ExperimentReport`; ``report.write(out_dir)``
emits ``report.json`` plus the experiment's CSV tables:

* exp1, exp2: ``scores.csv`` with columns dataset, point_id, kind, score, rank
  (point ids are ``test:<row>`` or ``attack:<c>``; rank 1 is most outlying).
* exp3: ``accuracy_curve.csv`` with columns d_att, none, d_def=1, d_def=3,
  d_def=5 (mean accuracy over trials) and ``trials.csv``.
* exp4: ``scores.csv`` with columns dataset, d_att, kind, score, rank.
* fig1: ``trace.csv`` (see :class:`poisonlab.attack.AttackTrace`) and
  ``surface.csv`` with columns x1, x2, W.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .attack import AttackConfig, FeasibleDomain, PenaltyTerm, attacker_objective, nearest_distance, poison
from .data import (TOY_SCALE, TOY_SEPARATION, Dataset, apply_standardizer, fit_standardizer,
                   gen_gaussian_toy, load_uci, raw_bounds, split, toy_config)
from .detect import KINDS as DETECTORS
from .detect import DistanceThreshold, fit_scorer, rank
from .exceptions import ConvergenceWarning
from .io import write_csv, write_json
from .linmod import GramStats, LinearModel

__all__ = [
    "UCI_NAMES",
    "ExperimentReport",
    "trial_seed",
    "toy_domain",
    "prepare_uci",
    "exp1_original_attack_detectability",
    "exp2_evasive_attack_detectability",
    "exp3_threshold_game",
    "exp4_score_vs_strength",
    "replicate_fig1",
    "calibrate_toy_separation",
    "calibrate_toy_scale",
]

UCI_NAMES = ("spambase", "credit-approval", "congressional-voting")
D_ATT_GRID = tuple(float(v) for v in np.linspace(0.0, 10.0, 21))
DEFENDERS = (None, 1.0, 3.0, 5.0)
UCI_BOX_MARGIN = 1.0

# Counters in the seed scheme, one per experiment.
_EXP_ID = {"exp1": 1, "exp2": 2, "exp3": 3, "exp4": 4, "fig1": 5}


def trial_seed(master: int, experiment: str, *counters: int) -> int:
    key = (_EXP_ID[experiment], *(int(c) for c in counters))
    return int(np.random.SeedSequence(int(master), spawn_key=key).generate_state(1)[0])


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "version": __version__, "config": self.config,
                "records": self.records, "aggregates": self.aggregates}

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", self.to_dict())
        for name, (header, rows) in self.tables.items():
            write_csv(out / name, header, rows)
        return out


def _map(fn, tasks, jobs):
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def _quiet_poison(cfg):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return poison(cfg)


# ---------------------------------------------------------------------------
# Data preparation


@dataclass(frozen=True)
class Prepared:
    name: str
    train: Dataset
    test: Dataset
    domain: FeasibleDomain


def prepare_uci(name: str, seed: int, data_dir=None, train_fraction: float = 0.8,
                margin: float = UCI_BOX_MARGIN) -> Prepared:
    """Load, split and standardize a UCI set; build its attack box.

    The box pads the standardized training range by ``margin`` times the
    range on each side and is intersected with the dataset's natural raw
    bounds when it has any.
    """
    raw = load_uci(name, data_dir)
    train, test = split(raw, train_fraction, seed)
    st = fit_standardizer(train)
    train, test = apply_standardizer(st, train), apply_standardizer(st, test)
    domain = FeasibleDomain.from_data(train.features, margin)
    bounds = raw_bounds(name, raw.d)
    if bounds is not None:
        domain = domain.intersect(FeasibleDomain(*st.transform_bounds(*bounds)))
    return Prepared(name, train, test, domain)


def toy_domain(half_width: float = 30.0) -> FeasibleDomain:
    """Toy attack box, wide enough that the distance threshold binds before the box does."""
    return FeasibleDomain.box(2, -half_width, half_width)


def _toy(seed, separation=None, scale=None):
    return gen_gaussian_toy(toy_config(seed, 25, separation, scale))


def _accuracy(X, y, lam=0.1):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        m = LinearModel(lam=lam).fit(X, y)
    return float(np.mean(m.predict(X) == y))


# ---------------------------------------------------------------------------
# Experiments 1 and 2: detectability of attack points in a test pool


# Unit-length ascent directions with sigma = 0.5 let a point cross a
# standardized feature range in a handful of steps; the box margin of one
# full range on each side leaves room for that on bounded features.
ATTACK_DEFAULTS = {"step_size": 0.5, "steps": 200, "lam": 0.1, "reg": "lasso"}
DETECTOR_DEFAULTS = {"dt": {"d_def": 1.0}, "ocsvm": {"nu": 0.1}, "iforest": {"n_trees": 100}, "lof": {"k": 20}}


def _merge(defaults, override):
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in defaults.items()}
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def _detect_task(task):
    (exp, name, master, idx, penalty, attack, detectors, pool_size, data_dir) = task
    seed = trial_seed(master, exp, idx)
    prep = prepare_uci(name, seed, data_dir)
    cfg = AttackConfig(reference=prep.train, q=2, domain=prep.domain, penalty=penalty, seed=seed, **attack)
    trace = _quiet_poison(cfg)
    pts = trace.final_points
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(prep.test.n, size=min(pool_size, prep.test.n), replace=False))
    pool = np.vstack([prep.test.features[pick], pts])
    ids = [f"test:{int(r)}" for r in prep.test.row_ids[pick]] + [f"attack:{c}" for c in range(pts.shape[0])]
    n_test = pick.size
    rows, per_det = [], {}
    for kind in DETECTORS:
        sc = fit_scorer(kind, detectors[kind], prep.train, seed)
        scores, order = rank(sc, pool)
        ranks = np.empty(order.size, dtype=int)
        ranks[order] = np.arange(1, order.size + 1)
        rows.extend([name, pid, kind, float(scores[i]), int(ranks[i])] for i, pid in enumerate(ids))
        att = ranks[n_test:]
        per_det[kind] = {"attack_ranks": att.tolist(), "attack_scores": scores[n_test:].tolist(),
                         "both_top2": bool(np.all(att <= 2))}
    model = trace.final_model
    clean = LinearModel(**model.get_params()).fit(prep.train.features, prep.train.labels)
    record = {
        "dataset": name,
        "seed": seed,
        "n_train": prep.train.n,
        "n_test": prep.test.n,
        "d": prep.train.d,
        "attack_labels": trace.labels.tolist(),
        "attack_nn_distance": [nearest_distance(p, prep.train) for p in pts],
        "W_initial": float(trace.objective[0]),
        "W_final": float(trace.objective[-1]),
        "test_accuracy_clean": float(np.mean(clean.predict(prep.test.features) == prep.test.labels)),
        "test_accuracy_poisoned": float(np.mean(model.predict(prep.test.features) == prep.test.labels)),
        "flags": trace.flags,
        "detectors": per_det,
    }
    return record, rows


def _detectability(exp, penalty, datasets, seed, attack, detectors, pool_size, data_dir, jobs):
    attack = _merge(ATTACK_DEFAULTS, attack)
    detectors = _merge(DETECTOR_DEFAULTS, detectors)
    tasks = [(exp, name, seed, UCI_NAMES.index(name), penalty, attack, detectors, pool_size, data_dir)
             for name in datasets]
    out = _map(_detect_task, tasks, jobs)
    records = [r for r, _ in out]
    rows = [row for _, rs in out for row in rs]
    config = {"seed": seed, "datasets": list(datasets), "penalty": penalty.to_dict(), "attack": attack,
              "q": 2, "detectors": detectors, "pool_test_instances": pool_size,
              "seed_scheme": f"trial_seed(master, '{exp}', dataset_index)"}
    top2 = {k: {r["dataset"]: r["detectors"][k]["both_top2"] for r in records} for k in DETECTORS}
    agg = {
        "both_top2": top2,
        "pairs_both_top2": int(sum(v for d in top2.values() for v in d.values())),
        "pairs_total": len(records) * len(DETECTORS),
        "datasets_with_some_detector_top2": {r["dataset"]: any(r["detectors"][k]["both_top2"] for k in DETECTORS)
                                             for r in records},
    }
    return ExperimentReport(exp, config, records, agg,
                            {"scores.csv": (["dataset", "point_id", "kind", "score", "rank"], rows)})


def exp1_original_attack_detectability(datasets=UCI_NAMES, seed=0, *, attack=None, detectors=None,
                                       pool_size=40, data_dir=None, jobs=1) -> ExperimentReport:
    """Two unpenalized attack points mixed into 40 test instances, ranked by every detector."""
    return _detectability("exp1", PenaltyTerm("none"), datasets, seed, attack, detectors, pool_size,
                          data_dir, jobs)


def exp2_evasive_attack_detectability(datasets=UCI_NAMES, seed=0, *, d_att=1.0, attack=None, detectors=None,
                                      pool_size=40, data_dir=None, jobs=1) -> ExperimentReport:
    """As :func:`exp1_original_attack_detectability` with a distance-threshold penalty."""
    return _detectability("exp2", PenaltyTerm("distance_threshold", d_att=d_att), datasets, seed, attack,
                          detectors, pool_size, data_dir, jobs)


# ---------------------------------------------------------------------------
# Experiment 3: attacker vs. defender distance thresholds on toy data


EXP3_ATTACK = {"step_size": 0.1, "steps": 150, "lam": 0.1, "reg": "lasso"}


def _exp3_task(task):
    master, trial, d_att, attack, separation, scale, half_width = task
    seed = trial_seed(master, "exp3", trial)
    data = _toy(seed, separation, scale)
    cfg = AttackConfig(reference=data, q=1, domain=toy_domain(half_width),
                       penalty=PenaltyTerm("distance_threshold", d_att=d_att), seed=seed, **attack)
    trace = _quiet_poison(cfg)
    x, y_c = trace.final_points[0], float(trace.labels[0])
    Xp, yp = np.vstack([data.features, x]), np.append(data.labels, y_c)
    lam = attack["lam"]
    poisoned = _accuracy(Xp, yp, lam)
    clean = _accuracy(data.features, data.labels, lam)
    guard = DistanceThreshold().fit(data.features)
    nn = float(guard.score_samples(x[None])[0])
    acc = [poisoned if (d_def is None or nn <= d_def) else clean for d_def in DEFENDERS]
    return {"trial": trial, "seed": seed, "d_att": d_att, "nn_distance": nn, "clean": clean, "accuracy": acc}


def _defender_name(d_def):
    return "none" if d_def is None else f"d_def={d_def:g}"


def exp3_threshold_game(seed=0, *, trials=50, grid=D_ATT_GRID, attack=None, separation=None, scale=None,
                        half_width=30.0, jobs=1) -> ExperimentReport:
    """Mean accuracy over trials for each (d_att, defender) pair.

    Each trial draws 25 + 25 toy points and one attack point started from a
    label-flipped training point.  The defender discards the attack point
    when its nearest-neighbor distance exceeds d_def; the learner is then
    retrained and its accuracy measured on the training set it saw (the
    legitimate points plus the attack point when kept).
    """
    attack = _merge(EXP3_ATTACK, attack)
    sep = TOY_SEPARATION if separation is None else separation
    sc = TOY_SCALE if scale is None else scale
    tasks = [(seed, t, float(g), attack, sep, sc, half_width) for g in grid for t in range(trials)]
    recs = _map(_exp3_task, tasks, jobs)
    names = [_defender_name(d) for d in DEFENDERS]
    curve = []
    for g in grid:
        accs = np.array([r["accuracy"] for r in recs if r["d_att"] == float(g)])
        curve.append([float(g), *accs.mean(axis=0)])
    curve_arr = np.array(curve)
    clean = float(np.mean([r["clean"] for r in recs if r["d_att"] == float(grid[0])]))
    agg = {
        "clean_accuracy": clean,
        "no_defense_at_max_d_att": float(curve_arr[-1, 1]),
        "worst_case": {n: float(curve_arr[:, i + 1].min()) for i, n in enumerate(names)},
        "worst_case_d_att": {n: float(curve_arr[int(curve_arr[:, i + 1].argmin()), 0]) for i, n in enumerate(names)},
    }
    config = {"seed": seed, "trials": trials, "grid": [float(g) for g in grid], "attack": attack,
              "separation": sep, "scale": sc, "samples_per_class": 25, "box_half_width": half_width,
              "defenders": names, "seed_scheme": "trial_seed(master, 'exp3', trial); shared across d_att"}
    trial_rows = [[r["d_att"], r["trial"], r["seed"], r["nn_distance"], r["clean"], *r["accuracy"]] for r in recs]
    tables = {
        "accuracy_curve.csv": (["d_att", *names], curve),
        "trials.csv": (["d_att", "trial", "seed", "nn_distance", "clean", *names], trial_rows),
    }
    return ExperimentReport("exp3", config, recs, agg, tables)


# ---------------------------------------------------------------------------
# Experiment 4: outlier score against attack strength


def _exp4_task(task):
    name, master, d_att, attack, detectors, pool_size, data_dir = task
    seed = trial_seed(master, "exp4", UCI_NAMES.index(name))
    prep = prepare_uci(name, seed, data_dir)
    pen = PenaltyTerm("distance_threshold", d_att=d_att)
    trace = _quiet_poison(AttackConfig(reference=prep.train, q=1, domain=prep.domain, penalty=pen, seed=seed,
                                       **attack))
    x = trace.final_points[0]
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(prep.test.n, size=min(pool_size, prep.test.n), replace=False))
    pool = np.vstack([prep.test.features[pick], x])
    out = {}
    for kind in DETECTORS:
        scores, order = rank(fit_scorer(kind, detectors[kind], prep.train, seed), pool)
        out[kind] = (float(scores[-1]), int(np.flatnonzero(order == pool.shape[0] - 1)[0]) + 1)
    return {"dataset": name, "d_att": d_att, "seed": seed, "nn_distance": nearest_distance(x, prep.train),
            "W_final": float(trace.objective[-1]), "scores": {k: v[0] for k, v in out.items()},
            "ranks": {k: v[1] for k, v in out.items()}}


def exp4_score_vs_strength(datasets=UCI_NAMES, seed=0, *, grid=D_ATT_GRID, attack=None, detectors=None,
                           pool_size=40, data_dir=None, jobs=1) -> ExperimentReport:
    """Outlier score of a single attack point as its distance budget grows."""
    attack = _merge(ATTACK_DEFAULTS, attack)
    detectors = _merge(DETECTOR_DEFAULTS, detectors)
    tasks = [(name, seed, float(g), attack, detectors, pool_size, data_dir) for name in datasets for g in grid]
    recs = _map(_exp4_task, tasks, jobs)
    rows = [[r["dataset"], r["d_att"], k, r["scores"][k], r["ranks"][k]] for r in recs for k in DETECTORS]
    spear = {}
    for name in datasets:
        rs = [r for r in recs if r["dataset"] == name]
        dd = [r["d_att"] for r in rs]
        spear[name] = {k: float(spearmanr(dd, [r["scores"][k] for r in rs]).statistic) for k in DETECTORS}
    config = {"seed": seed, "datasets": list(datasets), "grid": [float(g) for g in grid], "attack": attack,
              "q": 1, "detectors": detectors, "pool_test_instances": pool_size,
              "seed_scheme": "trial_seed(master, 'exp4', dataset_index); shared across d_att"}
    agg = {"spearman": spear, "all_positive": all(v > 0 for d in spear.values() for v in d.values())}
    return ExperimentReport("exp4", config, recs, agg,
                            {"scores.csv": (["dataset", "d_att", "kind", "score", "rank"], rows)})


# ---------------------------------------------------------------------------
# Toy trajectory and objective surface


def replicate_fig1(seed=0, *, lam=0.01, steps=400, step_size=0.05, grid_size=41, separation=None,
                   scale=None) -> ExperimentReport:
    """Single unpenalized attack point on toy data with the attacker objective over the box.

    The box is the data-driven default; the surface evaluates W with the
    learner refit on the toy data plus one point (carrying the attack label)
    at each grid node.
    """
    s = trial_seed(seed, "fig1")
    data = _toy(s, separation, scale)
    cfg = AttackConfig(reference=data, q=1, lam=lam, steps=steps, step_size=step_size, seed=s)
    trace = _quiet_poison(cfg)
    domain = cfg.resolved_domain()
    y_c = float(trace.labels[0])
    g1 = np.linspace(domain.lower[0], domain.upper[0], grid_size)
    g2 = np.linspace(domain.lower[1], domain.upper[1], grid_size)
    base = GramStats.from_data(data.features, data.labels)
    model = cfg.learner()
    surface = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for a in g1:
            for b in g2:
                model.fit_gram(base.copy().add(np.array([a, b]), y_c))
                surface.append([float(a), float(b), attacker_objective(data, model)])
    start, end = trace.positions[0, 0], trace.final_points[0]
    agg = {
        "start": start.tolist(),
        "end": end.tolist(),
        "W_start": float(trace.objective[0]),
        "W_end": float(trace.objective[-1]),
        "end_on_border": domain.on_border(end),
        "surface_max": float(max(r[2] for r in surface)),
    }
    config = {"seed": seed, "trial_seed": s, "attack": cfg.to_dict(), "grid_size": grid_size,
              "separation": TOY_SEPARATION if separation is None else separation,
              "scale": TOY_SCALE if scale is None else scale}
    tables = {"trace.csv": (trace.header(), list(trace.rows())), "surface.csv": (["x1", "x2", "W"], surface)}
    report = ExperimentReport("fig1", config, [trace.summary()], agg, tables)
    report.trace = trace
    return report


# ---------------------------------------------------------------------------
# Toy calibration


def clean_toy_accuracy(separation, trials=50, seed=0, scale=None, lam=0.1) -> float:
    """Mean clean accuracy over the same toy draws :func:`exp3_threshold_game` uses."""
    accs = []
    for t in range(trials):
        d = _toy(trial_seed(seed, "exp3", t), separation, scale)
        accs.append(_accuracy(d.features, d.labels, lam))
    return float(np.mean(accs))


def calibrate_toy_separation(target=0.961, trials=50, seed=0, lo=2.0, hi=5.0, iters=20) -> float:
    """Bisect the class separation until the mean clean accuracy crosses ``target``."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if clean_toy_accuracy(mid, trials, seed) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_toy_scale(candidates=(0.3, 0.4, 0.45, 0.5, 0.6), target=0.878, d_att=10.0, trials=50, seed=0,
                        jobs=1) -> tuple[float, dict]:
    """Pick the toy scale whose undefended accuracy at ``d_att`` is closest to ``target``."""
    table = {}
    for s in candidates:
        rep = exp3_threshold_game(seed, trials=trials, grid=(d_att,), scale=s, jobs=jobs)
        table[float(s)] = rep.aggregates["no_defense_at_max_d_att"]
    best = min(table, key=lambda s: abs(table[s] - target))
    return best, table
