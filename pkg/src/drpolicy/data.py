"""Datasets, CSV ingestion, fold assignment and the two synthetic designs.

Random streams come from numpy's ``PCG64`` bit generator (PCG-XSL-RR 128/64)
seeded through ``SeedSequence``; every simulator documents its draw order so
that a stream can be reproduced outside this package.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

BINARY = "binary"
CONTINUOUS = "continuous"

IV_DIM = 10


def make_rng(*seed: int) -> np.random.Generator:
    """PCG64 generator keyed by one or more non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``(X, Y, W, Z)`` plus the columns a policy may split on.

    ``policy_features`` holds 0-based column indices. ``row_index`` tracks
    original row numbers through :meth:`subset`, which lets oracle nuisance
    tables follow the rows they belong to.
    """

    features: np.ndarray
    outcome: np.ndarray
    treatment: np.ndarray
    instrument: Optional[np.ndarray] = None
    feature_names: tuple = ()
    policy_features: tuple = ()
    treatment_kind: str = BINARY
    row_index: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"features must be an n x p matrix with n, p >= 1, got shape {X.shape}")
        n, p = X.shape
        y = np.asarray(self.outcome, dtype=float).reshape(-1)
        w = np.asarray(self.treatment, dtype=float).reshape(-1)
        z = None if self.instrument is None else np.asarray(self.instrument, dtype=float).reshape(-1)
        for name, arr in (("outcome", y), ("treatment", w), ("instrument", z)):
            if arr is not None and arr.shape[0] != n:
                raise DataError(f"{name} has length {arr.shape[0]}, expected {n}")
        if self.treatment_kind not in (BINARY, CONTINUOUS):
            raise ConfigError(f"unknown treatment kind {self.treatment_kind!r}")
        if self.treatment_kind == BINARY:
            _check_binary(w, "treatment")
        if z is not None:
            _check_binary(z, "instrument")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} columns")
        mask = tuple(int(j) for j in self.policy_features) if self.policy_features else tuple(range(p))
        if not mask or any(j < 0 or j >= p for j in mask) or len(set(mask)) != len(mask):
            raise DataError(f"policy feature mask {mask} is not a nonempty subset of 0..{p - 1}")
        rows = np.arange(n) if self.row_index is None else np.asarray(self.row_index, dtype=int)
        for arr in (X, y, w, z, rows):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", w)
        object.__setattr__(self, "instrument", z)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "policy_features", tuple(sorted(mask)))
        object.__setattr__(self, "row_index", rows)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def has_instrument(self) -> bool:
        return self.instrument is not None

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            features=self.features[rows],
            outcome=self.outcome[rows],
            treatment=self.treatment[rows],
            instrument=None if self.instrument is None else self.instrument[rows],
            feature_names=self.feature_names,
            policy_features=self.policy_features,
            treatment_kind=self.treatment_kind,
            row_index=self.row_index[rows],
        )

    def with_policy_features(self, mask: Sequence[Union[int, str]]) -> "Dataset":
        idx = [self.feature_names.index(m) if isinstance(m, str) else int(m) for m in mask]
        return Dataset(
            self.features, self.outcome, self.treatment, self.instrument,
            self.feature_names, tuple(idx), self.treatment_kind, self.row_index,
        )


def _check_binary(values: np.ndarray, name: str) -> None:
    bad = np.flatnonzero((values != 0) & (values != 1))
    if bad.size:
        raise DataError(f"binary violation in {name} at row {int(bad[0]) + 1}")


@dataclass(frozen=True)
class FoldAssignment:
    """Fold labels in ``1..K``, one per observation."""

    fold_of: np.ndarray
    K: int

    def __post_init__(self):
        f = np.asarray(self.fold_of, dtype=int)
        f.setflags(write=False)
        object.__setattr__(self, "fold_of", f)

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K + 1)[1:]

    def subset(self, rows) -> "FoldAssignment":
        return FoldAssignment(self.fold_of[np.asarray(rows)], self.K)


def assign_folds(n: int, K: int, seed: int) -> FoldAssignment:
    """Uniformly random balanced partition of ``range(n)`` into ``K`` folds.

    A permutation of ``n`` is drawn and position ``q`` goes to fold ``q % K + 1``,
    so fold sizes differ by at most one.
    """
    if not isinstance(K, (int, np.integer)) or K < 2:
        raise ConfigError(f"need K >= 2 folds, got {K}")
    if K > n:
        raise ConfigError(f"cannot split {n} observations into {K} folds")
    perm = make_rng(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % K + 1
    return FoldAssignment(fold_of, int(K))


@dataclass(frozen=True)
class TauSpec:
    """Treatment-effect function used by the instrumental-variable design.

    ``additive``: ((x1)+ + (x2)+ - 1) / 2.  ``product``: sign(x1 * x2) / 2.
    ``custom`` wraps a vectorised callable ``X -> tau``.
    """

    tag: str
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.tag not in ("additive", "product", "custom"):
            raise ConfigError(f"unknown tau spec {self.tag!r}")
        if self.tag == "custom" and self.fn is None:
            raise ConfigError("custom tau spec needs an evaluator")

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.tag == "additive":
            return (np.maximum(X[:, 0], 0) + np.maximum(X[:, 1], 0) - 1) / 2
        if self.tag == "product":
            return np.sign(X[:, 0] * X[:, 1]) / 2
        return np.asarray(self.fn(X), dtype=float)


def _expit(t):
    return 1.0 / (1.0 + np.exp(-t))


def simulate_iv(n: int, tau: TauSpec, seed: int):
    """Binary endogenous treatment with a binary instrument.

    Draw order from one PCG64 stream: X (n x 10 normals, row-major), then
    uniforms for Z, normals for the noise, uniforms for Q.  ``W = Q and Z`` and
    ``Y = (x3 + x4)+ + W tau(X) + noise``.

    Returns
    -------
    (Dataset, ndarray)
        The data and the realised ``tau(X_i)``.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = make_rng(seed)
    X = rng.standard_normal((n, IV_DIM))
    Z = (rng.random(n) < _expit(X[:, 2])).astype(float)
    eps = rng.standard_normal(n)
    Q = (rng.random(n) < _expit(eps + X[:, 3])).astype(float)
    W = Q * Z
    t = tau(X)
    Y = np.maximum(X[:, 2] + X[:, 3], 0) + W * t + eps
    return Dataset(X, Y, W, Z), t


def ambiguous_tau(X: np.ndarray, tau_scale: float) -> np.ndarray:
    """Unscaled effect ``tau_scale * sign(x1)`` of the shrinking-signal design."""
    return tau_scale * np.sign(np.asarray(X)[:, 0])


def simulate_ambiguous(n: int, s: int, tau_scale: float, seed: int) -> Dataset:
    """Shrinking-signal design with ``f = 0``, ``e = 0.5``, ``sigma = 1``.

    X is uniform on ``[-0.5, 0.5]^s`` and the effect ``tau_scale * sign(x1)``
    enters divided by ``sqrt(n)``.  Draw order: X (uniforms, row-major),
    treatment uniforms, outcome normals.
    """
    if n < 1 or s < 1:
        raise ConfigError("n and s must be >= 1")
    rng = make_rng(seed)
    X = rng.random((n, s)) - 0.5
    e = 0.5
    W = (rng.random(n) < e).astype(float)
    Y = (W - e) * ambiguous_tau(X, tau_scale) / math.sqrt(n) + rng.standard_normal(n)
    return Dataset(X, Y, W)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping by name. ``features`` is a list of names or ``"rest"``."""

    outcome: str = "y"
    treatment: str = "w"
    instrument: Optional[str] = None
    features: Union[str, Sequence[str]] = "rest"
    treatment_kind: str = BINARY
    policy_features: Optional[Sequence[str]] = None

    @classmethod
    def parse(cls, text: str, **overrides) -> "CsvSchema":
        """Parse ``key=value`` pairs separated by ``;``, e.g. ``outcome=y;features=a,b``."""
        kw = {}
        for part in filter(None, (s.strip() for s in text.split(";"))):
            key, sep, value = part.partition("=")
            if not sep:
                raise ConfigError(f"bad schema entry {part!r}")
            key = key.strip()
            if key in ("features", "policy_features") and value.strip() != "rest":
                kw[key] = [v.strip() for v in value.split(",") if v.strip()]
            elif key in ("outcome", "treatment", "instrument", "features", "treatment_kind"):
                kw[key] = value.strip()
            else:
                raise ConfigError(f"unknown schema key {key!r}")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def load_csv(path: Union[str, Path], schema: CsvSchema = CsvSchema()) -> Dataset:
    """Read a header-first, comma-separated file into a :class:`Dataset`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path} has a header but no data rows")
    col = {name: j for j, name in enumerate(header)}
    special = [schema.outcome, schema.treatment] + ([schema.instrument] if schema.instrument else [])
    if schema.features == "rest":
        feats = [h for h in header if h not in special]
    else:
        feats = list(schema.features)
    for name in special + feats:
        if name not in col:
            raise DataError(f"missing column {name!r} in {path}")
    if not feats:
        raise DataError("no feature columns")

    wanted = special + feats
    out = np.empty((len(rows), len(wanted)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {i + 1} has {len(row)} fields, header has {len(header)}")
        for j, name in enumerate(wanted):
            cell = row[col[name]]
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r} at row {i + 1}, column {name!r}") from None
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise DataError(f"non-finite value at row {i + 1}, column {wanted[j]!r}")

    instrument = out[:, 2] if schema.instrument else None
    X = out[:, len(special):]
    for name, values in ((schema.treatment, out[:, 1]), (schema.instrument, instrument)):
        if values is None or (name == schema.treatment and schema.treatment_kind != BINARY):
            continue
        bad = np.flatnonzero((values != 0) & (values != 1))
        if bad.size:
            raise DataError(f"binary violation at row {int(bad[0]) + 1} (column {name!r})")
    mask = ()
    if schema.policy_features:
        missing = [m for m in schema.policy_features if m not in feats]
        if missing:
            raise DataError(f"policy features {missing} are not feature columns")
        mask = tuple(feats.index(m) for m in schema.policy_features)
    return Dataset(X, out[:, 0], out[:, 1], instrument, tuple(feats), mask, schema.treatment_kind)


def write_csv(data: Dataset, path: Union[str, Path], outcome: str = "y",
              treatment: str = "w", instrument: str = "z") -> None:
    """Write features, outcome, treatment (and instrument) with round-trip precision."""
    header = list(data.feature_names) + [outcome, treatment]
    cols = [data.features, data.outcome[:, None], data.treatment[:, None]]
    if data.has_instrument:
        header.append(instrument)
        cols.append(data.instrument[:, None])
    table = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in table:
            writer.writerow([repr(float(v)) for v in row])
