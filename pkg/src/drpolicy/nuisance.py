"""Cross-fitted nuisance predictions.

For every fold ``k`` each requested conditional function is fit on the other
folds and evaluated on fold ``k``.  Treatment-effect and variance models need
residuals on the training folds; those come from an inner two-way split of the
training folds so no prediction ever touches the held-out fold.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .data import BINARY, CONTINUOUS, Dataset, FoldAssignment
from .errors import ConfigError, DataError, NumericError
from .forest import ForestParams, fit_honest_forest, fit_knn, max_threads

TARGETS = ("f", "e", "tau", "z", "delta", "mu_w", "sigma_w")
SIGMA_FLOOR = 1e-3

_TARGET_CODE = {name: i for i, name in enumerate(TARGETS)}
_INNER = 100  # seed offset for inner residual fits

OracleValue = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, float]


@dataclass(frozen=True)
class NuisanceLearnerSpec:
    """Which learner to cross-fit with.

    ``kind`` is ``honest_forest``, ``knn`` or ``oracle``.  Oracle entries map a
    target name to a callable of ``X``, a scalar, or a full-length array
    indexed by :attr:`Dataset.row_index`.
    """

    kind: str = "honest_forest"
    num_trees: int = 100
    subsample: float = 0.5
    min_leaf: int = 5
    mtry: Optional[int] = None
    k: int = 10
    oracle: Optional[Mapping[str, OracleValue]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("honest_forest", "knn", "oracle"):
            raise ConfigError(f"unknown learner kind {self.kind!r}")
        if self.kind == "honest_forest":
            self.forest_params()
        if self.kind == "knn" and self.k < 1:
            raise ConfigError("knn needs k >= 1")
        if self.kind == "oracle" and not self.oracle:
            raise ConfigError("oracle learner needs oracle functions")

    def forest_params(self) -> ForestParams:
        return ForestParams(self.num_trees, self.subsample, self.min_leaf, self.mtry)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("oracle")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NuisanceLearnerSpec":
        allowed = {"kind", "num_trees", "subsample", "min_leaf", "mtry", "k"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown learner keys {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, text: str) -> "NuisanceLearnerSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class CrossFitNuisance:
    """Out-of-fold predictions keyed by target name."""

    predictions: Mapping[str, np.ndarray]
    folds: FoldAssignment
    spec: NuisanceLearnerSpec
    tau_mode: str = "robinson"

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.predictions[name]
        except KeyError:
            raise ConfigError(f"nuisance target {name!r} was not fitted") from None

    def __contains__(self, name: str) -> bool:
        return name in self.predictions

    def subset(self, rows) -> "CrossFitNuisance":
        rows = np.asarray(rows)
        preds = {k: v[rows] for k, v in self.predictions.items()}
        return CrossFitNuisance(preds, self.folds.subset(rows), self.spec, self.tau_mode)


def default_targets(family: str) -> set:
    return {
        "aipw": {"f", "e", "tau"},
        "ipw": {"e"},
        "iv": {"f", "e", "tau", "z", "delta"},
        "continuous": {"f", "tau", "mu_w", "sigma_w"},
    }[family]


def _oracle_eval(value: OracleValue, data: Dataset) -> np.ndarray:
    if callable(value):
        out = np.asarray(value(data.features), dtype=float)
    elif np.ndim(value) == 0:
        out = np.full(data.n, float(value))
    else:
        arr = np.asarray(value, dtype=float)
        if arr.shape[0] <= data.row_index.max():
            raise DataError("oracle table is shorter than the data")
        out = arr[data.row_index]
    return np.broadcast_to(out, (data.n,)).astype(float)


class _Learner:
    def __init__(self, spec: NuisanceLearnerSpec, seed: int):
        self.spec = spec
        self.seed = seed

    def fit_predict(self, X_tr, y, X_te, key, sample_weight=None, ratio=None):
        if self.spec.kind == "knn":
            model = fit_knn(X_tr, y, self.spec.k, sample_weight, ratio)
        else:
            ss = np.random.SeedSequence([self.seed, *key])
            model = fit_honest_forest(
                X_tr, y, self.spec.forest_params(), ss, sample_weight, ratio
            )
        return model.predict(X_te)


def _check_targets(data: Dataset, targets) -> None:
    unknown = set(targets) - set(TARGETS)
    if unknown:
        raise ConfigError(f"unknown nuisance targets {sorted(unknown)}")
    if {"z", "delta"} & set(targets) and not data.has_instrument:
        raise DataError("instrument targets requested but the data has no instrument column")
    if {"mu_w", "sigma_w"} & set(targets) and data.treatment_kind != CONTINUOUS:
        raise DataError("density targets need a continuous treatment")
    if "delta" in targets and data.treatment_kind != BINARY:
        raise DataError("compliance targets need a binary treatment")


def _check_fold(data: Dataset, tr, k) -> None:
    if tr.size < 2:
        raise NumericError(f"fold {k}: training folds hold only {tr.size} observations")
    if data.treatment_kind == BINARY:
        w = data.treatment[tr]
        if np.all(w == w[0]):
            state = "all-treated" if w[0] == 1 else "all-control"
            raise NumericError(f"fold {k}: training folds are degenerate ({state})")
    if data.has_instrument:
        z = data.instrument[tr]
        if np.all(z == z[0]):
            raise NumericError(f"fold {k}: training folds have a constant instrument")


def _tau_mode(data: Dataset, targets) -> str:
    return "iv" if ("z" in targets and data.has_instrument) else "robinson"


def _oracle_predictions(data: Dataset, spec: NuisanceLearnerSpec, targets) -> dict:
    missing = set(targets) - set(spec.oracle)
    if missing:
        raise ConfigError(f"oracle learner lacks {sorted(missing)}")
    preds = {t: _oracle_eval(spec.oracle[t], data) for t in sorted(targets)}
    if "sigma_w" in preds and np.any(preds["sigma_w"] <= 0):
        raise NumericError("oracle sigma_w must be positive")
    return preds


def fit_crossfit(data: Dataset, folds: FoldAssignment, spec: NuisanceLearnerSpec,
                 targets, seed: int = 0) -> CrossFitNuisance:
    """Out-of-fold predictions of every requested target.

    ``tau`` is fit with the instrument residual when the data carries an
    instrument and ``z`` is among the targets (local IV), otherwise with the
    treatment residual (local Robinson).
    """
    targets = set(targets)
    _check_targets(data, targets)
    if folds.n != data.n:
        raise DataError(f"fold assignment covers {folds.n} rows, data has {data.n}")
    tau_mode = _tau_mode(data, targets)
    if spec.kind == "oracle":
        return CrossFitNuisance(_oracle_predictions(data, spec, targets), folds, spec, tau_mode)

    jobs = []
    for k in range(1, folds.K + 1):
        te = folds.members(k)
        tr = np.flatnonzero(folds.fold_of != k)
        _check_fold(data, tr, k)
        if te.size:
            jobs.append((k, tr, te))

    def run(job):
        k, tr, te = job
        return _fit_split(data, tr, te, spec, targets, tau_mode, seed, k)

    # every fold is seeded by its own index, so the thread count cannot
    # change the predictions
    workers = min(max_threads(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    preds = {t: np.empty(data.n) for t in targets}
    for (k, tr, te), fitted in zip(jobs, results):
        for name, values in fitted.items():
            preds[name][te] = values
    return CrossFitNuisance(preds, folds, spec, tau_mode)


def fit_holdout(data: Dataset, train, test, spec: NuisanceLearnerSpec, targets,
                seed: int = 0) -> dict:
    """Predictions on ``test`` rows from models fit on ``train`` rows only."""
    targets = set(targets)
    _check_targets(data, targets)
    train, test = np.asarray(train), np.asarray(test)
    if spec.kind == "oracle":
        return _oracle_predictions(data.subset(test), spec, targets)
    _check_fold(data, train, "holdout")
    return _fit_split(data, train, test, spec, targets, _tau_mode(data, targets), seed, 0)


def _fit_split(data, tr, te, spec, targets, tau_mode, seed, k) -> dict:
    X, Y, W, Z = data.features, data.outcome, data.treatment, data.instrument
    learner = _Learner(spec, seed)
    out = {}

    def fp(y, code, rows=tr, **kw):
        return learner.fit_predict(X[rows], y[rows], X[te], (k, code), **kw)

    if "f" in targets:
        out["f"] = fp(Y, _TARGET_CODE["f"])
    if "mu_w" in targets:
        out["mu_w"] = fp(W, _TARGET_CODE["mu_w"])
    if "e" in targets:
        out["e"] = out["mu_w"] if "mu_w" in out else fp(W, _TARGET_CODE["e"])
    if "z" in targets:
        out["z"] = fp(Z, _TARGET_CODE["z"])
    if "delta" in targets:
        arms = []
        for arm in (1.0, 0.0):
            rows = tr[Z[tr] == arm]
            if rows.size < 2:
                raise NumericError(f"fold {k}: fewer than 2 training rows with instrument={arm:g}")
            arms.append(fp(W, _TARGET_CODE["delta"] * 10 + int(arm), rows=rows))
        out["delta"] = arms[0] - arms[1]

    if {"tau", "sigma_w"} & targets:
        res = _inner_residuals(data, tr, learner, k, tau_mode, seed)
        if "tau" in targets:
            y_res, w_res = res["y"], res["w"]
            if tau_mode == "iv":
                z_res = res["z"]
                num, den = z_res * y_res, z_res * w_res
                # splits follow a one-step IV pseudo-outcome around the pooled estimate
                pooled = num.sum() / den.sum() if abs(den.sum()) > 1e-12 else 0.0
                target = z_res * (y_res - w_res * pooled) / max(abs(den.mean()), 1e-12)
                weight = None
            else:
                num, den = w_res * y_res, w_res**2
                ok = den > 1e-12
                target = np.where(ok, y_res / np.where(ok, w_res, 1.0), 0.0)
                weight = den
            out["tau"] = learner.fit_predict(
                X[tr], target, X[te], (k, _TARGET_CODE["tau"]),
                sample_weight=weight, ratio=(num, den),
            )
        if "sigma_w" in targets:
            var = learner.fit_predict(X[tr], res["w"] ** 2, X[te], (k, _TARGET_CODE["sigma_w"]))
            out["sigma_w"] = np.maximum(np.sqrt(np.maximum(var, 0.0)), SIGMA_FLOOR)
    return out


def _inner_residuals(data, tr, learner, k, tau_mode, seed):
    """Residuals of Y, W (and Z) on the training rows from a two-way inner split."""
    X = data.features
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k, _INNER])))
    half = np.zeros(tr.size, dtype=bool)
    half[rng.permutation(tr.size)[: tr.size // 2]] = True
    cols = {"y": data.outcome, "w": data.treatment}
    if tau_mode == "iv":
        cols["z"] = data.instrument
    out = {name: np.empty(tr.size) for name in cols}
    for side in (True, False):
        fit_rows, pred_rows = tr[half != side], tr[half == side]
        for code, (name, col) in enumerate(cols.items()):
            out[name][half == side] = col[pred_rows] - learner.fit_predict(
                X[fit_rows], col[fit_rows], X[pred_rows], (k, _INNER + 2 * code + int(side))
            )
    return out
