"""Command-line front end: one command is one reproducible batch run.

Every JSON artifact carries a ``provenance`` block with the resolved
configuration, the seed and library versions.  Settings come from flags, an
optional ``--config`` JSON file, and built-in defaults, in that order of
precedence.

Failures print ``{"error": kind, "message": ..., "exit_code": ...}`` to stderr
and exit with 2 (configuration), 3 (data) or 4 (numerics).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import CONTINUOUS, BINARY, CsvSchema, TauSpec, load_csv, simulate_ambiguous, simulate_iv, write_csv
from .errors import ConfigError, DataError, DrPolicyError
from .evaluation import advantage, cross_validate, regret_bound_diag
from .experiments import oracle_learner, sweep
from .nuisance import TARGETS, NuisanceLearnerSpec
from .pipeline import PipelineConfig, fit_scores, learn_policy
from .policy import TreePolicy
from .scores import DEFAULT_DELTA_MIN, DEFAULT_ETA, DEFAULT_GMAX

DEFAULTS = {
    "input": None,
    "output_dir": ".",
    "family": "aipw",
    "learner": "forest",
    "oracle_file": None,
    "num_trees": 100,
    "min_leaf": 5,
    "knn_k": 10,
    "k": 5,
    "depth": 2,
    "c": 0.0,
    "eta": DEFAULT_ETA,
    "delta_min": DEFAULT_DELTA_MIN,
    "gmax": DEFAULT_GMAX,
    "seed": 0,
    "mask": None,
    "dgp": "iv",
    "tau": "product",
    "n": "1000",
    "seeds": "0",
    "s": 2,
    "tau_scale": 1.0,
    "refit_scores_per_fold": False,
    "policy": None,
    "outcome": "y",
    "treatment": "w",
    "instrument": None,
    "features": "rest",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drpolicy", description="Doubly robust policy learning with exact depth-limited trees.")
    parser.add_argument("--version", action="version", version=f"drpolicy {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    # defaults are SUPPRESS so that only flags given on the command line override the config file
    opt = dict(default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with settings (flags take precedence)")
    common.add_argument("--output-dir", **opt, help="directory for artifacts (default: .)")
    common.add_argument("--seed", type=int, **opt, help="master seed (default 0)")

    model = _Parser(add_help=False)
    model.add_argument("--family", choices=("aipw", "iv", "continuous", "ipw"), **opt)
    model.add_argument("--learner", choices=("forest", "knn", "oracle-file", "oracle"), **opt,
                       help="nuisance learner; 'oracle' is the simulated design's truth (sweep only)")
    model.add_argument("--oracle-file", **opt, help="CSV with one column per nuisance target, one row per observation")
    model.add_argument("--num-trees", type=int, **opt)
    model.add_argument("--min-leaf", type=int, **opt)
    model.add_argument("--knn-k", type=int, **opt, help="neighbours for the knn learner")
    model.add_argument("--k", type=int, **opt, help="number of folds (cross-fitting, or CV for crossval)")
    model.add_argument("--depth", type=int, **opt)
    model.add_argument("--c", type=float, **opt, help="treatment cost C")
    model.add_argument("--eta", type=float, **opt, help="propensity clipping level")
    model.add_argument("--delta-min", type=float, **opt, help="weak-instrument threshold")
    model.add_argument("--gmax", type=float, **opt, help="continuous-treatment weight cap")
    model.add_argument("--mask", **opt, help="comma list of feature names or 0-based indices the policy may use")
    model.add_argument("--refit-scores-per-fold", action="store_true", **opt)

    data = _Parser(add_help=False)
    data.add_argument("--input", **opt, help="input CSV")
    data.add_argument("--outcome", **opt)
    data.add_argument("--treatment", **opt)
    data.add_argument("--instrument", **opt, help="instrument column (default: z when present)")
    data.add_argument("--features", **opt, help="comma list of feature columns, or 'rest'")

    design = _Parser(add_help=False)
    design.add_argument("--dgp", choices=("iv", "ambiguous"), **opt)
    design.add_argument("--tau", choices=("additive", "product"), **opt)
    design.add_argument("--s", type=int, **opt, help="dimension of the ambiguous design")
    design.add_argument("--tau-scale", type=float, **opt)

    sp = sub.add_parser("simulate", parents=[common, design], help="write a simulated dataset")
    sp.add_argument("--n", **opt)
    sub.add_parser("learn", parents=[common, model, data], help="learn a policy from a CSV")
    ev = sub.add_parser("evaluate", parents=[common, model, data], help="evaluate a policy JSON on a CSV")
    ev.add_argument("--policy", **opt, help="policy JSON")
    sub.add_parser("crossval", parents=[common, model, data], help="cross-validated improvement")
    sw = sub.add_parser("sweep", parents=[common, model, design], help="replications over (n, seed)")
    sw.add_argument("--n", **opt, help="comma list of sample sizes")
    sw.add_argument("--seeds", **opt, help="comma list of seeds or a range a-b (inclusive)")
    return parser


def resolve(argv=None) -> dict:
    args = vars(build_parser().parse_args(argv))
    cfg = dict(DEFAULTS)
    path = args.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(args)
    return cfg


def _int_list(text, name) -> list:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"bad {name} entry {part!r}") from None
    if not out:
        raise ConfigError(f"{name} is empty")
    return out


def provenance(cfg: dict) -> dict:
    import numba
    import sklearn

    return {
        "tool": "drpolicy",
        "config": {k: v for k, v in sorted(cfg.items())},
        "seed": cfg["seed"],
        "versions": {
            "drpolicy": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scikit-learn": sklearn.__version__,
            "numba": numba.__version__,
        },
    }


def _write_json(path: Path, payload: dict, cfg: dict, stamp: bool = False) -> None:
    payload = dict(payload)
    payload["provenance"] = provenance(cfg)
    if stamp:
        # the only field allowed to differ between identical runs
        payload["provenance"]["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(cfg):
    if not cfg["input"]:
        raise ConfigError("--input is required")
    path = Path(cfg["input"])
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    instrument = cfg["instrument"]
    if instrument is None and "z" in header:
        instrument = "z"
    features = cfg["features"]
    if features != "rest":
        features = [f.strip() for f in str(features).split(",") if f.strip()]
    kind = CONTINUOUS if cfg["family"] == "continuous" else BINARY
    schema = CsvSchema(cfg["outcome"], cfg["treatment"], instrument, features, kind)
    data = load_csv(path, schema)
    if cfg["mask"]:
        mask = [m.strip() for m in str(cfg["mask"]).split(",") if m.strip()]
        mask = [int(m) if m.lstrip("-").isdigit() else m for m in mask]
        bad = [m for m in mask if isinstance(m, str) and m not in data.feature_names]
        if bad:
            raise DataError(f"mask names unknown features {bad}")
        data = data.with_policy_features(mask)
    return data


def _learner(cfg, data=None) -> NuisanceLearnerSpec:
    kind = cfg["learner"]
    if kind == "forest":
        return NuisanceLearnerSpec("honest_forest", num_trees=cfg["num_trees"], min_leaf=cfg["min_leaf"])
    if kind == "knn":
        return NuisanceLearnerSpec("knn", k=cfg["knn_k"])
    if kind == "oracle-file":
        if not cfg["oracle_file"]:
            raise ConfigError("--learner oracle-file needs --oracle-file")
        table = load_oracle_file(cfg["oracle_file"])
        if data is not None:
            lengths = {len(v) for v in table.values()}
            if lengths != {data.n}:
                raise DataError(f"oracle file has {lengths.pop()} rows, data has {data.n}")
        return NuisanceLearnerSpec("oracle", oracle=table)
    if kind == "oracle":
        raise ConfigError("--learner oracle is only available for sweep")
    raise ConfigError(f"unknown learner {kind!r}")


def load_oracle_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path} has no data rows")
    header = [h.strip() for h in rows[0]]
    unknown = set(header) - set(TARGETS)
    if unknown:
        raise DataError(f"oracle file columns {sorted(unknown)} are not nuisance targets {list(TARGETS)}")
    try:
        table = np.array([[float(v) for v in r] for r in rows[1:] if r])
    except ValueError as exc:
        raise DataError(f"non-numeric oracle value: {exc}") from None
    return {name: table[:, j] for j, name in enumerate(header)}


def _pipeline(cfg, data=None, learner=None) -> PipelineConfig:
    return PipelineConfig(
        family=cfg["family"], learner=learner or _learner(cfg, data), nuisance_folds=cfg["k"],
        depth=cfg["depth"], cost=cfg["c"], eta=cfg["eta"], delta_min=cfg["delta_min"],
        gmax=cfg["gmax"], refit_scores_per_fold=bool(cfg["refit_scores_per_fold"]),
    )


def _policy_payload(policy: TreePolicy, data) -> dict:
    d = policy.to_dict()
    d["feature_names"] = [data.feature_names[j] for j in range(data.p)]
    return d


def cmd_simulate(cfg):
    out = _out_dir(cfg)
    ns = _int_list(cfg["n"], "n")
    if len(ns) != 1:
        raise ConfigError("simulate takes a single --n")
    n, seed = ns[0], cfg["seed"]
    if cfg["dgp"] == "iv":
        data, tau = simulate_iv(n, TauSpec(cfg["tau"]), seed)
    else:
        data = simulate_ambiguous(n, cfg["s"], cfg["tau_scale"], seed)
        tau = cfg["tau_scale"] * np.sign(data.features[:, 0]) / math.sqrt(n)
    write_csv(data, out / "data.csv")
    with (out / "true_tau.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "tau"])
        for i, t in enumerate(tau):
            writer.writerow([i, repr(float(t))])
    _write_json(out / "simulate.json", {"n": n, "p": data.p, "dgp": cfg["dgp"]}, cfg)
    return 0


def cmd_learn(cfg):
    data = _load(cfg)
    config = _pipeline(cfg, data)
    out = _out_dir(cfg)
    result = learn_policy(data, config, cfg["seed"])
    report = advantage(result.policy.predict(data.features), result.scores)
    rep = report.to_dict()
    rep["bound"] = regret_bound_diag(result.scores, max(config.depth, 1), len(data.policy_features))
    rep["objective"] = result.objective
    rep["policy"] = result.policy.to_dict()
    _write_json(out / "policy.json", _policy_payload(result.policy, data), cfg)
    _write_json(out / "report.json", rep, cfg, stamp=True)
    result.scores.to_csv(out / "scores.csv")
    return 0


def cmd_evaluate(cfg):
    if not cfg["policy"]:
        raise ConfigError("--policy is required")
    path = Path(cfg["policy"])
    try:
        policy = TreePolicy.from_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read policy {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"policy {path} is not valid JSON: {exc}") from None
    data = _load(cfg)
    needed = max(policy.split_features, default=-1)
    if needed >= data.p:
        raise DataError(f"policy splits on feature {needed} but the data has {data.p} features")
    config = _pipeline(cfg, data)
    scores, _ = fit_scores(data, config, cfg["seed"])
    rep = advantage(policy.predict(data.features), scores).to_dict()
    rep["policy"] = policy.to_dict()
    _write_json(_out_dir(cfg) / "report.json", rep, cfg, stamp=True)
    return 0


def cmd_crossval(cfg):
    data = _load(cfg)
    config = _pipeline(cfg, data)
    out = _out_dir(cfg)
    cv = cross_validate(data, config, K=cfg["k"], seed=cfg["seed"])
    fold_dir = out / "fold_policies"
    fold_dir.mkdir(exist_ok=True)
    for k, pol in enumerate(cv.fold_policies, start=1):
        _write_json(fold_dir / f"policy_fold{k}.json", _policy_payload(pol, data), cfg)
    with (out / "agreement.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "cv_fold", "agreement"])
        for i, (k, a) in enumerate(zip(cv.cv_fold_of, cv.agreement)):
            writer.writerow([i, int(k), repr(float(a))])
    payload = {
        "a_cv": cv.a_cv, "se": cv.se, "K": cfg["k"], "n": data.n,
        "full_policy": cv.full_policy.to_dict(),
        "mean_agreement": float(np.mean(cv.agreement)),
    }
    _write_json(out / "crossval.json", payload, cfg, stamp=True)
    return 0


def cmd_sweep(cfg):
    ns = _int_list(cfg["n"], "n")
    seeds = _int_list(cfg["seeds"], "seeds")
    if cfg["learner"] == "oracle-file":
        raise ConfigError("sweep simulates its data; use --learner oracle for the true nuisances")
    tau = TauSpec(cfg["tau"]) if cfg["dgp"] == "iv" else None
    learner = oracle_learner(cfg["dgp"], tau) if cfg["learner"] == "oracle" else None
    config = _pipeline(cfg, learner=learner)
    rows = sweep(cfg["dgp"], ns, seeds, config, tau, cfg["s"], cfg["tau_scale"])
    out = _out_dir(cfg)
    cols = ["seed", "n", "family", "a_hat", "se", "true_improvement"]
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["seed"], r["n"], r["family"]] + [repr(float(r[c])) for c in cols[3:]])
    summary = {
        str(n): float(np.mean([r["true_improvement"] for r in rows if r["n"] == n])) for n in ns
    }
    _write_json(out / "sweep.json", {"mean_true_improvement": summary, "rows": len(rows)}, cfg)
    return 0


HANDLERS = {
    "simulate": cmd_simulate, "learn": cmd_learn, "evaluate": cmd_evaluate,
    "crossval": cmd_crossval, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
        return HANDLERS[cfg["command"]](cfg)
    except DrPolicyError as exc:
        err = {"error": exc.kind, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
