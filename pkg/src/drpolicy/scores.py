"""Per-observation doubly robust scores.

Every family returns ``Gamma_i`` such that ``mean((2 pi(X_i) - 1) Gamma_i)``
estimates the advantage of ``pi`` over random assignment, net of the
treatment cost ``C``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import BINARY, CONTINUOUS, Dataset, FoldAssignment
from .errors import ConfigError, DataError, NumericError, WeakInstrumentError
from .nuisance import CrossFitNuisance

FAMILIES = ("aipw", "iv", "continuous", "ipw")

DEFAULT_ETA = 0.05
DEFAULT_GMAX = 20.0
DEFAULT_DELTA_MIN = 0.05


@dataclass(frozen=True, eq=False)
class ScoreSet:
    gamma: np.ndarray
    family: str
    cost: float
    eta: Optional[float] = None
    folds: Optional[FoldAssignment] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite {self.family} score at index {int(np.flatnonzero(~np.isfinite(g))[0])}")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    def subset(self, rows) -> "ScoreSet":
        rows = np.asarray(rows)
        folds = None if self.folds is None else self.folds.subset(rows)
        return ScoreSet(self.gamma[rows], self.family, self.cost, self.eta, folds, dict(self.params))

    def provenance(self) -> dict:
        return {"family": self.family, "cost": self.cost, "eta": self.eta, **self.params}

    def to_csv(self, path) -> None:
        fold = self.folds.fold_of if self.folds is not None else np.zeros(self.n, dtype=int)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "gamma", "fold"])
            for i, (g, k) in enumerate(zip(self.gamma, fold)):
                writer.writerow([i, repr(float(g)), int(k)])


def _check_eta(eta):
    if not 0 < eta < 0.5:
        raise ConfigError(f"eta must lie in (0, 0.5), got {eta}")


def _require_binary(data: Dataset):
    if data.treatment_kind != BINARY or np.any((data.treatment != 0) & (data.treatment != 1)):
        raise DataError("this score family needs a binary treatment")


def _clip(p, eta):
    return np.clip(p, eta, 1 - eta)


def aipw_scores(data: Dataset, nu: CrossFitNuisance, C: float = 0.0, eta: float = DEFAULT_ETA) -> ScoreSet:
    """Augmented inverse-propensity weighted scores under the partially linear
    outcome model ``f(x) + (w - e(x)) tau(x)``."""
    _require_binary(data)
    _check_eta(eta)
    f, e, tau = nu["f"], _clip(nu["e"], eta), nu["tau"]
    W, Y = data.treatment, data.outcome
    gamma = tau - C + (W - e) / (e * (1 - e)) * (Y - f - (W - e) * tau)
    return ScoreSet(gamma, "aipw", float(C), float(eta), nu.folds)


def iv_scores(data: Dataset, nu: CrossFitNuisance, C: float = 0.0, eta: float = DEFAULT_ETA,
              delta_min: float = DEFAULT_DELTA_MIN) -> ScoreSet:
    """Doubly robust scores with compliance weights.

    The weight is ``(Z - z) / (Delta z (1 - z))``.  Both ``z`` and the
    propensity ``e`` in the residual are clipped to ``[eta, 1 - eta]``, so
    with perfect compliance the result coincides with :func:`aipw_scores`.
    """
    _require_binary(data)
    _check_eta(eta)
    if not data.has_instrument:
        raise DataError("iv scores need an instrument column")
    delta = nu["delta"]
    weak = np.flatnonzero(np.abs(delta) < delta_min)
    if weak.size:
        raise WeakInstrumentError(weak, delta_min)
    f, e, tau = nu["f"], _clip(nu["e"], eta), nu["tau"]
    z = _clip(nu["z"], eta)
    Z, W, Y = data.instrument, data.treatment, data.outcome
    g = (Z - z) / (z * (1 - z)) / delta
    gamma = tau - C + g * (Y - f - (W - e) * tau)
    return ScoreSet(gamma, "iv", float(C), float(eta), nu.folds, {"delta_min": float(delta_min)})


def continuous_scores(data: Dataset, nu: CrossFitNuisance, C: float = 0.0,
                      gmax: float = DEFAULT_GMAX) -> ScoreSet:
    """Scores for a marginal nudge of a continuous treatment.

    ``W | X`` is modelled as normal with mean ``mu_w`` and sd ``sigma_w``, so
    the weight ``-d/dw log density`` is ``(W - mu_w) / sigma_w**2``, clipped
    to ``[-gmax, gmax]``.
    """
    if data.treatment_kind != CONTINUOUS:
        raise DataError("continuous scores need a continuous treatment")
    if gmax <= 0:
        raise ConfigError("gmax must be positive")
    mu, sigma = nu["mu_w"], nu["sigma_w"]
    if np.any(sigma <= 0):
        raise NumericError("sigma_w must be positive everywhere")
    f, tau = nu["f"], nu["tau"]
    W, Y = data.treatment, data.outcome
    g = np.clip((W - mu) / sigma**2, -gmax, gmax)
    gamma = tau - C + g * (Y - (f + (W - mu) * tau))
    return ScoreSet(gamma, "continuous", float(C), None, nu.folds, {"gmax": float(gmax)})


def ipw_scores(data: Dataset, nu: CrossFitNuisance, C: float = 0.0, eta: float = DEFAULT_ETA) -> ScoreSet:
    """Signed inverse-propensity scores ``W Y / e - (1 - W) Y / (1 - e) - C``.

    With ``C = 0``, for any policy ``sum 1{W = pi} Y / P(W = pi | X)`` equals
    ``0.5 * sum (2 pi - 1) Gamma`` plus a term that does not depend on the
    policy, so both objectives share their maximiser.  A nonzero ``C`` charges
    every treated unit.
    """
    _require_binary(data)
    _check_eta(eta)
    e = _clip(nu["e"], eta)
    W, Y = data.treatment, data.outcome
    gamma = W * Y / e - (1 - W) * Y / (1 - e) - C
    return ScoreSet(gamma, "ipw", float(C), float(eta), nu.folds)


def compute_scores(family: str, data: Dataset, nu: CrossFitNuisance, C: float = 0.0,
                   eta: float = DEFAULT_ETA, delta_min: float = DEFAULT_DELTA_MIN,
                   gmax: float = DEFAULT_GMAX) -> ScoreSet:
    if family == "aipw":
        return aipw_scores(data, nu, C, eta)
    if family == "iv":
        return iv_scores(data, nu, C, eta, delta_min)
    if family == "continuous":
        return continuous_scores(data, nu, C, gmax)
    if family == "ipw":
        return ipw_scores(data, nu, C, eta)
    raise ConfigError(f"unknown score family {family!r}")
