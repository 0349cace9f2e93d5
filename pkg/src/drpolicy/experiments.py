"""Replication helpers for the simulated designs.

These wrap the data generators with their true nuisance functions, run one
learn-and-evaluate replication per ``(n, seed)`` pair and compute in-class
optima that learned policies are compared against.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Iterable, List, Optional

import numpy as np

from .data import IV_DIM, TauSpec, make_rng, simulate_ambiguous, simulate_iv
from .errors import ConfigError
from .evaluation import advantage, ambiguous_improvement, true_improvement
from .forest import max_threads
from .nuisance import NuisanceLearnerSpec
from .pipeline import PipelineConfig, learn_policy

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def _expit(t):
    return 1.0 / (1.0 + np.exp(-t))


def iv_compliance(X: np.ndarray) -> np.ndarray:
    """True ``P[W | Z=1, X] - P[W | Z=0, X] = E[expit(eps + x4)]`` (Gauss-Hermite)."""
    x4 = np.asarray(X, dtype=float)[:, 3]
    return _expit(_GH_NODES[None, :] + x4[:, None]) @ _GH_WEIGHTS


def iv_oracle(tau: TauSpec) -> dict:
    """True nuisance functions of :func:`~drpolicy.data.simulate_iv`."""

    def z(X):
        return _expit(X[:, 2])

    def e(X):
        return z(X) * iv_compliance(X)

    def f(X):
        return np.maximum(X[:, 2] + X[:, 3], 0) + e(X) * tau(X)

    return {"f": f, "e": e, "z": z, "delta": iv_compliance, "tau": tau}


def ambiguous_oracle() -> dict:
    """Nuisances for the shrinking-signal design: known ``e`` and zero outcome models."""
    return {"f": 0.0, "e": 0.5, "tau": 0.0}


def oracle_learner(dgp: str, tau: Optional[TauSpec] = None) -> NuisanceLearnerSpec:
    if dgp == "iv":
        if tau is None:
            raise ConfigError("the iv design needs a tau spec")
        return NuisanceLearnerSpec(kind="oracle", oracle=iv_oracle(tau))
    if dgp == "ambiguous":
        return NuisanceLearnerSpec(kind="oracle", oracle=ambiguous_oracle())
    raise ConfigError(f"unknown design {dgp!r}")


def replicate(dgp: str, n: int, seed: int, config: PipelineConfig, tau: Optional[TauSpec] = None,
              s: int = 2, tau_scale: float = 1.0, oracle: bool = False, n_mc: int = 100_000) -> dict:
    """Simulate, learn a policy and score it against the truth.

    ``true_improvement`` for the iv design is a Monte Carlo value with a fixed
    evaluation sample; for the shrinking-signal design it is exact and
    already divided by ``sqrt(n)``.
    """
    if dgp == "iv":
        if tau is None:
            raise ConfigError("the iv design needs a tau spec")
        data, _ = simulate_iv(n, tau, seed)
    elif dgp == "ambiguous":
        data = simulate_ambiguous(n, s, tau_scale, seed)
    else:
        raise ConfigError(f"unknown design {dgp!r}")
    if oracle:
        config = replace(config, learner=oracle_learner(dgp, tau))
    result = learn_policy(data, config, seed)
    report = advantage(result.policy.predict(data.features), result.scores)
    if dgp == "iv":
        truth = true_improvement(result.policy, tau, n_mc, seed=0)
    else:
        truth = ambiguous_improvement(result.policy, s, tau_scale) / math.sqrt(n)
    return {
        "seed": seed, "n": n, "family": config.family,
        "a_hat": report.a_hat, "se": report.se, "true_improvement": truth,
        "policy": result.policy,
    }


def sweep(dgp: str, ns: Iterable[int], seeds: Iterable[int], config: PipelineConfig,
          tau: Optional[TauSpec] = None, s: int = 2, tau_scale: float = 1.0,
          oracle: bool = False, n_mc: int = 100_000) -> List[dict]:
    """:func:`replicate` over the ``(n, seed)`` grid, in grid order.

    Replications run on up to ``DRPOLICY_THREADS`` threads; each one is fully
    determined by its seed.
    """
    grid = [(int(n), int(sd)) for n in ns for sd in seeds]

    def run(cell):
        return replicate(dgp, cell[0], cell[1], config, tau, s, tau_scale, oracle, n_mc)

    workers = min(max_threads(), len(grid))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, grid))
    return [run(cell) for cell in grid]


def additive_optimum(n_draws: int = 1_000_000, bins: int = 400, seed: int = 0) -> float:
    """Best improvement of a depth-2 tree for the additive effect, by grid search.

    The effect depends on ``x1`` and ``x2`` only, so optimal trees split on
    those two.  Candidate thresholds are ``bins - 1`` empirical quantiles of a
    ``n_draws`` sample; the value of a tree is ``sum_leaves |sum tau| / n``.
    """
    X = make_rng(seed).standard_normal((n_draws, IV_DIM))
    tau = TauSpec("additive")(X)
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    edges = [np.quantile(X[:, j], qs) for j in (0, 1)]
    i = np.searchsorted(edges[0], X[:, 0])
    j = np.searchsorted(edges[1], X[:, 1])
    H = np.zeros((bins, bins))
    np.add.at(H, (i, j), tau)
    best = 0.0
    for grid in (H, H.T):  # root splits on x1, then on x2
        for a in range(1, bins):
            best = max(best, _child_value(grid[:a]) + _child_value(grid[a:]))
    return best / n_draws


def _child_value(G: np.ndarray) -> float:
    """Best depth-1 value ``|left| + |right|`` on a block of the 2-d histogram."""
    total = G.sum()
    rows = np.cumsum(G.sum(axis=1))
    cols = np.cumsum(G.sum(axis=0))
    cand = np.concatenate([[abs(total)], np.abs(rows) + np.abs(total - rows),
                           np.abs(cols) + np.abs(total - cols)])
    return float(cand.max())
