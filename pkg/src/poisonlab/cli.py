"""Command-line interface.

Usage: ``poisonlab <command> [options]``; run ``poisonlab <command> -h`` for
the options of each command.  Settings are resolved as built-in defaults,
then a ``--config`` file (JSON object, or ``key = value`` lines), then flags.
The resolved settings are written to ``config.json`` in every output
directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, harness
from .attack import AttackConfig, PenaltyTerm, nearest_distance, poison
from .data import (UCI_DATASETS, CsvSchema, Dataset, apply_standardizer, fit_standardizer, gen_gaussian_toy,
                   load_csv, load_uci, split, toy_config)
from .detect import KINDS as DETECTORS
from .detect import fit_scorer, score_table
from .exceptions import ConvergenceWarning, DataError, NumericalError
from .io import write_csv, write_json
from .linmod import LinearModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PENALTY_ALIASES = {"none": "none", "dt": "distance_threshold", "distance_threshold": "distance_threshold",
                   "knn": "knn_power", "knn_power": "knn_power"}

COMMON = {"seed": 0, "out": None, "data_dir": None}
LEARNER = {"lambda": 0.1, "kind": "lasso", "rho": 0.5}
DEFAULTS = {
    "prep": {**COMMON, "dataset": "spambase", "train_fraction": 0.8},
    "train": {**COMMON, **LEARNER, "dataset": "toy", "train_fraction": 0.8},
    "attack": {**COMMON, **LEARNER, "dataset": "toy", "q": 1, "sigma": None, "steps": None, "penalty": "none",
               "d_att": 1.0, "phi": 0.0, "k": 1, "P": 2.0, "margin": None},
    "score": {**COMMON, "dataset": "toy", "points": None, "detector": "dt", "d_def": 1.0, "nu": 0.1,
              "gamma": None, "trees": 100, "subsample": None, "lof_k": 20},
    "exp1": {**COMMON, "jobs": 1},
    "exp2": {**COMMON, "jobs": 1, "d_att": 1.0},
    "exp3": {**COMMON, "jobs": 1, "trials": 50},
    "exp4": {**COMMON, "jobs": 1},
    "fig1": {**COMMON, "lambda": 0.01, "steps": 400, "sigma": 0.05},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p, *, data=True):
    p.add_argument("--config", help="JSON or key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if data:
        p.add_argument("--data-dir", dest="data_dir", help="directory holding the UCI raw files")


def _add_learner(p):
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--kind", choices=("lasso", "ridge", "elastic_net"))
    p.add_argument("--rho", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="poisonlab", description="Poisoning attacks on embedded feature selection.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"poisonlab {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    ds_help = "toy, a UCI name (" + ", ".join(UCI_DATASETS) + ") or a CSV file with a 'label' column"

    p = sub.add_parser("prep", help="load, split and standardize a dataset", argument_default=argparse.SUPPRESS)
    _add_common(p)
    p.add_argument("--dataset", help=ds_help)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)

    p = sub.add_parser("train", help="fit the learner and print its accuracy", argument_default=argparse.SUPPRESS)
    _add_common(p)
    _add_learner(p)
    p.add_argument("--dataset", help=ds_help)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)

    p = sub.add_parser("attack", help="run the poisoning attack and write its trace",
                       argument_default=argparse.SUPPRESS)
    _add_common(p)
    _add_learner(p)
    p.add_argument("--dataset", help=ds_help)
    p.add_argument("--q", type=int, help="number of attack points")
    p.add_argument("--sigma", type=float, help="step size in (0, 1]")
    p.add_argument("--steps", type=int)
    p.add_argument("--penalty", choices=sorted(PENALTY_ALIASES))
    p.add_argument("--d-att", dest="d_att", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--P", type=float)
    p.add_argument("--margin", type=float, help="box margin as a fraction of each feature's range")

    p = sub.add_parser("score", help="fit a detector and rank a file of points", argument_default=argparse.SUPPRESS)
    _add_common(p)
    p.add_argument("--dataset", help="training data for the detector; " + ds_help)
    p.add_argument("--points", help="CSV of points to score (header row; a 'label' column is ignored)")
    p.add_argument("--detector", choices=DETECTORS)
    p.add_argument("--d-def", dest="d_def", type=float)
    p.add_argument("--nu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--trees", type=int)
    p.add_argument("--subsample", type=int)
    p.add_argument("--lof-k", dest="lof_k", type=int)

    for name, text in [("exp1", "detectability of unpenalized attack points"),
                       ("exp2", "detectability with a distance-threshold penalty"),
                       ("exp3", "attacker vs. defender threshold sweep on toy data"),
                       ("exp4", "outlier score against attack strength"),
                       ("fig1", "toy attack trajectory and objective surface")]:
        p = sub.add_parser(name, help=text, argument_default=argparse.SUPPRESS)
        _add_common(p, data=name != "fig1")
        if name != "fig1":
            p.add_argument("--jobs", type=int, help="worker processes")
        if name == "exp2":
            p.add_argument("--d-att", dest="d_att", type=float)
        if name == "exp3":
            p.add_argument("--trials", type=int)
        if name == "fig1":
            p.add_argument("--lambda", dest="lambda", type=float)
            p.add_argument("--steps", type=int)
            p.add_argument("--sigma", type=float)
    return parser


def read_config(path) -> dict:
    """Settings from a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
        return {str(k).replace("-", "_"): v for k, v in doc.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config {path}, line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key.replace("-", "_")] = json.loads(value)
        except json.JSONDecodeError:
            out[key.replace("-", "_")] = value
    return out


def resolve(command: str, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    if flags.get("config"):
        from_file = read_config(flags["config"])
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(from_file)
    cfg.update({k: v for k, v in flags.items() if k not in ("config", "command")})
    return cfg


# ---------------------------------------------------------------------------
# Data helpers


def _load(spec: str, cfg: dict) -> tuple[Dataset, Dataset | None, object]:
    """Training data, optional test data and attack box for a dataset spec."""
    if spec == "toy":
        data = gen_gaussian_toy(toy_config(cfg["seed"]))
        return data, None, harness.toy_domain()
    if spec in UCI_DATASETS:
        margin = cfg.get("margin")
        prep = harness.prepare_uci(spec, cfg["seed"], cfg.get("data_dir"),
                                   margin=harness.UCI_BOX_MARGIN if margin is None else margin)
        return prep.train, prep.test, prep.domain
    path = Path(spec)
    if not path.is_file():
        raise DataError(f"dataset {spec!r} is neither toy, a UCI name nor an existing file")
    return load_csv(path, CsvSchema(label="label", header=True, positive_label="1")), None, None


def _write_dataset(path, d: Dataset):
    write_csv(path, [*d.feature_names, "label"], (list(x) + [y] for x, y in zip(d.features, d.labels)))


def _out(cfg, default):
    out = Path(cfg["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_prep(cfg):
    name = cfg["dataset"]
    if name not in UCI_DATASETS:
        raise UsageError(f"prep expects one of {', '.join(UCI_DATASETS)}")
    raw = load_uci(name, cfg["data_dir"])
    train, test = split(raw, cfg["train_fraction"], cfg["seed"])
    st = fit_standardizer(train)
    out = _out(cfg, f"runs/prep-{name}")
    _write_dataset(out / "train.csv", apply_standardizer(st, train))
    _write_dataset(out / "test.csv", apply_standardizer(st, test))
    write_json(out / "standardizer.json", {"feature_names": list(raw.feature_names), "mean": st.mean_,
                                           "scale": st.scale_})
    write_json(out / "config.json", cfg)
    print(f"{name}: n={raw.n} d={raw.d} train={train.n} test={test.n} -> {out}")


def _learner(cfg, lam=None):
    return LinearModel(lam=cfg["lambda"] if lam is None else lam, reg=cfg["kind"], rho=cfg["rho"])


def cmd_train(cfg):
    train, test, _ = _load(cfg["dataset"], cfg)
    if test is None and cfg["dataset"] != "toy":
        train, test = split(train, cfg["train_fraction"], cfg["seed"])
    model = _learner(cfg).fit(train.features, train.labels)
    acc = float(np.mean(model.predict(train.features) == train.labels))
    line = f"train accuracy {acc:.4f}"
    doc = {"train_accuracy": acc, "n_iter": model.n_iter_, "converged": model.converged_}
    if test is not None:
        doc["test_accuracy"] = float(np.mean(model.predict(test.features) == test.labels))
        line += f"  test accuracy {doc['test_accuracy']:.4f}"
    print(line)
    if cfg["out"]:
        out = _out(cfg, cfg["out"])
        write_json(out / "model.json", model.to_dict())
        write_json(out / "metrics.json", doc)
        write_json(out / "config.json", cfg)


def cmd_attack(cfg):
    train, _, domain = _load(cfg["dataset"], cfg)
    kind = PENALTY_ALIASES[cfg["penalty"]]
    pen = PenaltyTerm(kind, d_att=cfg["d_att"], phi=cfg["phi"], k=cfg["k"], P=cfg["P"])
    toy = cfg["dataset"] == "toy"
    base = harness.EXP3_ATTACK if toy else harness.ATTACK_DEFAULTS
    sigma = base["step_size"] if cfg["sigma"] is None else cfg["sigma"]
    steps = base["steps"] if cfg["steps"] is None else cfg["steps"]
    cfg = {**cfg, "sigma": sigma, "steps": steps}
    acfg = AttackConfig(reference=train, q=cfg["q"], step_size=sigma, steps=steps, lam=cfg["lambda"],
                        reg=cfg["kind"], rho=cfg["rho"], domain=domain, penalty=pen, seed=cfg["seed"])
    trace = poison(acfg)
    out = _out(cfg, "runs/attack")
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "trace.json")
    write_json(out / "model.json", trace.final_model.to_dict())
    write_json(out / "config.json", cfg)
    for c, x in enumerate(trace.final_points):
        print(f"point {c}: nearest-neighbor distance {nearest_distance(x, train):.4f}")
    print(f"W {trace.objective[0]:.6g} -> {trace.objective[-1]:.6g}; {len(trace.flags)} flags -> {out}")


def cmd_score(cfg):
    if not cfg["points"]:
        raise UsageError("score needs --points")
    train, _, _ = _load(cfg["dataset"], cfg)
    points = _read_points(cfg["points"], train.d)
    params = {"dt": {"d_def": cfg["d_def"]}, "ocsvm": {"nu": cfg["nu"], "gamma": cfg["gamma"]},
              "iforest": {"n_trees": cfg["trees"], "subsample": cfg["subsample"]},
              "lof": {"k": cfg["lof_k"]}}[cfg["detector"]]
    scorer = fit_scorer(cfg["detector"], params, train, cfg["seed"])
    rows = score_table({cfg["detector"]: scorer}, points, list(range(points.shape[0])))
    out = _out(cfg, "runs/score")
    write_csv(out / "scores.csv", ["point_id", "kind", "score", "rank"], rows)
    write_json(out / "scorer.json", scorer.summary())
    write_json(out / "config.json", cfg)
    for pid, _, s, r in sorted(rows, key=lambda r: r[3]):
        print(f"rank {r:>4}  point {pid:>4}  score {s:.6g}")


def _read_points(path, d):
    import csv

    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise DataError(f"{path}: expected a header and at least one point")
    keep = [j for j, name in enumerate(rows[0]) if name.strip() != "label"]
    try:
        pts = np.array([[float(r[j]) for j in keep] for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if pts.shape[1] != d:
        raise DataError(f"{path}: points have {pts.shape[1]} features, training data has {d}")
    return pts


def _run_exp(name, cfg):
    seed, jobs = cfg["seed"], cfg.get("jobs", 1)
    if name == "exp1":
        rep = harness.exp1_original_attack_detectability(seed=seed, data_dir=cfg["data_dir"], jobs=jobs)
    elif name == "exp2":
        rep = harness.exp2_evasive_attack_detectability(seed=seed, d_att=cfg["d_att"], data_dir=cfg["data_dir"],
                                                        jobs=jobs)
    elif name == "exp3":
        rep = harness.exp3_threshold_game(seed, trials=cfg["trials"], jobs=jobs)
    elif name == "exp4":
        rep = harness.exp4_score_vs_strength(seed=seed, data_dir=cfg["data_dir"], jobs=jobs)
    else:
        rep = harness.replicate_fig1(seed, lam=cfg["lambda"], steps=cfg["steps"], step_size=cfg["sigma"])
    out = _out(cfg, f"runs/{name}")
    rep.write(out)
    write_json(out / "config.json", cfg)
    print(json.dumps(rep.aggregates, indent=2, sort_keys=True, default=str))
    print(f"-> {out}")


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "attack": cmd_attack, "score": cmd_score}


def cli_main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_usage().strip())
        ns = vars(parser.parse_args(argv))
        command = ns.get("command")
        if command is None:
            raise UsageError(parser.format_usage().strip())
        cfg = resolve(command, ns)
        cfg["command"] = command
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            if command in COMMANDS:
                COMMANDS[command](cfg)
            else:
                _run_exp(command, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"invalid settings: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(cli_main())
