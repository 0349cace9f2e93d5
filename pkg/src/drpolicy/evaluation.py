"""Policy evaluation, cross-validation, stability and complexity diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .data import IV_DIM, Dataset, TauSpec, assign_folds, make_rng
from .errors import ConfigError, DataError
from .nuisance import CrossFitNuisance, default_targets, fit_holdout
from .pipeline import PipelineConfig, derive_seed, fit_scores, learn_policy
from .policy import TreePolicy, exact_tree_search, vc_proxy
from .scores import ScoreSet, compute_scores


@dataclass(frozen=True)
class EvalReport:
    a_hat: float
    se: float
    s_hat: float
    n: int
    family: Optional[str] = None
    bound: Optional[dict] = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "a_hat": self.a_hat, "se": self.se, "s_hat": self.s_hat, "n": self.n,
            "family": self.family, "bound": self.bound, "scores": self.provenance,
        }


def _signed(actions, gamma: np.ndarray) -> np.ndarray:
    a = np.asarray(actions).reshape(-1)
    if a.shape[0] != gamma.shape[0]:
        raise DataError(f"{a.shape[0]} actions for {gamma.shape[0]} scores")
    return (2 * a - 1) * gamma


def _mean_se(values: np.ndarray) -> tuple:
    n = values.shape[0]
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(values)), se


def advantage(actions, scores: Union[ScoreSet, np.ndarray]) -> EvalReport:
    """Estimated improvement over random assignment, with its standard error.

    ``se`` is the sample standard deviation of ``(2 pi_i - 1) Gamma_i`` over
    ``sqrt(n)``; ``s_hat`` is the mean squared score.
    """
    if isinstance(scores, ScoreSet):
        g, family, prov = scores.gamma, scores.family, scores.provenance()
    else:
        g, family, prov = np.asarray(scores, dtype=float), None, {}
    a_hat, se = _mean_se(_signed(actions, g))
    return EvalReport(a_hat, se, float(np.mean(g**2)), int(g.shape[0]), family, None, prov)


def fold_agreement(full_policy: TreePolicy, fold_policies: Sequence[TreePolicy], X) -> np.ndarray:
    """Per observation, the share of fold policies that act like the full-data policy."""
    if not fold_policies:
        raise ConfigError("need at least one fold policy")
    ref = full_policy.predict(X)
    return np.mean([p.predict(X) == ref for p in fold_policies], axis=0)


@dataclass(frozen=True, eq=False)
class CrossValidation:
    a_cv: float
    se: float
    fold_policies: List[TreePolicy]
    full_policy: TreePolicy
    agreement: np.ndarray
    scores: ScoreSet
    cv_fold_of: np.ndarray


def cross_validate(data: Dataset, config: PipelineConfig, K: int = 10, seed: int = 0) -> CrossValidation:
    """Hold-out estimate of the improvement delivered by the learning procedure.

    For each fold ``k`` a policy is learned from scratch (nuisances, scores and
    tree) on the other folds and scored on fold ``k``.  By default the scores
    used for that are the full-data cross-fitted ones; with
    ``config.refit_scores_per_fold`` they come from nuisances fit on the
    training folds only.
    """
    if K < 2:
        raise ConfigError("cross-validation needs K >= 2")
    if 2 * K > data.n:
        raise ConfigError(f"K={K} leaves folds with fewer than 2 of {data.n} observations")
    full_scores, _ = fit_scores(data, config, seed)
    cv = assign_folds(data.n, K, derive_seed(seed, 10))
    gamma = full_scores.gamma.copy()
    signed = np.empty(data.n)
    policies = []
    for k in range(1, K + 1):
        test = cv.members(k)
        train = np.flatnonzero(cv.fold_of != k)
        fold_seed = derive_seed(seed, 11, k)
        result = learn_policy(data.subset(train), config, fold_seed)
        policies.append(result.policy)
        if config.refit_scores_per_fold:
            preds = fit_holdout(data, train, test, config.learner,
                                default_targets(config.family), derive_seed(fold_seed, 3))
            sub = data.subset(test)
            nu = CrossFitNuisance(preds, cv.subset(test), config.learner)
            gamma[test] = compute_scores(config.family, sub, nu, config.cost, config.eta,
                                         config.delta_min, config.gmax).gamma
        signed[test] = (2 * result.policy.predict(data.features[test]) - 1) * gamma[test]
    a_cv, se = _mean_se(signed)
    used = full_scores if not config.refit_scores_per_fold else ScoreSet(
        gamma, full_scores.family, full_scores.cost, full_scores.eta, cv, dict(full_scores.params))
    full_policy, _ = exact_tree_search(data.features, full_scores, config.depth, data.policy_features)
    agreement = fold_agreement(full_policy, policies, data.features)
    return CrossValidation(a_cv, se, policies, full_policy, agreement, used, cv.fold_of)


PolicyLike = Union[TreePolicy, Callable[[np.ndarray], np.ndarray]]


def _actions(policy: PolicyLike, X) -> np.ndarray:
    if isinstance(policy, TreePolicy):
        return policy.predict(X)
    return np.asarray(policy(X)).reshape(-1)


def true_improvement(policy: PolicyLike, tau: TauSpec, n_mc: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo value of ``E[(2 pi(X) - 1) tau(X)]`` with ``X ~ N(0, I_10)``."""
    if n_mc < 1:
        raise ConfigError("n_mc must be >= 1")
    X = make_rng(seed).standard_normal((n_mc, IV_DIM))
    return float(np.mean((2 * _actions(policy, X) - 1) * tau(X)))


def ambiguous_improvement(policy: TreePolicy, s: int, tau_scale: float = 1.0) -> float:
    """Exact ``E[(2 pi(X) - 1) tau_scale sign(x1)]`` for X uniform on [-1/2, 1/2]^s.

    Divide by ``sqrt(n)`` to get the improvement at sample size ``n``.
    """
    lo = np.full(s, -0.5)
    hi = np.full(s, 0.5)

    def walk(level, q, lo, hi):
        if level == policy.depth:
            if np.any(hi <= lo):
                return 0.0
            width = np.prod(hi[1:] - lo[1:])
            signed_len = max(hi[0], 0.0) - max(lo[0], 0.0) - (min(hi[0], 0.0) - min(lo[0], 0.0))
            return (2 * policy.leaves[q] - 1) * width * signed_len
        nd = policy.nodes[2**level - 1 + q]
        if nd is None:
            return walk(level + 1, 2 * q, lo, hi)
        j, t = nd
        if j >= s:
            raise DataError(f"policy splits on feature {j} but the design has {s}")
        lh, rl = hi.copy(), lo.copy()
        lh[j] = min(hi[j], t)
        rl[j] = max(lo[j], t)
        return walk(level + 1, 2 * q, lo, lh) + walk(level + 1, 2 * q + 1, rl, hi)

    return tau_scale * walk(0, 0, lo, hi)


def haussler_entropy(eps: float, d: float) -> float:
    """Hamming-entropy bound ``d (ln(1/eps) + ln 2 + 1) + ln(d + 1) + 1``."""
    if not 0 < eps < 1:
        raise ConfigError("eps must lie in (0, 1)")
    return d * (math.log(1 / eps) + math.log(2) + 1) + math.log(d + 1) + 1


def regret_bound_diag(scores: Union[ScoreSet, np.ndarray], depth: int, p: int, eps: float = 0.25) -> dict:
    """Scaling heuristic for the regret of depth-``depth`` trees on ``p`` features.

    The universal constant in front of the rate is unknown, so ``rate`` is
    only meaningful for comparing settings, never as a guarantee.
    """
    if depth < 1 or p < 1:
        raise ConfigError("need depth >= 1 and p >= 1")
    g = scores.gamma if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=float)
    s_hat = float(np.mean(g**2))
    d = vc_proxy(depth, p)
    return {
        "kind": "diagnostic",
        "s_hat": s_hat,
        "vc_proxy": d,
        "eps": eps,
        "entropy_bound": haussler_entropy(eps, d),
        "rate": math.sqrt(d * s_hat / g.shape[0]),
        "n": int(g.shape[0]),
    }
