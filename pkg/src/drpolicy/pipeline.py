"""Data -> cross-fitted nuisances -> scores -> exact tree policy."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .data import Dataset, assign_folds
from .errors import ConfigError
from .nuisance import CrossFitNuisance, NuisanceLearnerSpec, default_targets, fit_crossfit
from .policy import TreePolicy, exact_tree_search
from .scores import (
    DEFAULT_DELTA_MIN, DEFAULT_ETA, DEFAULT_GMAX, FAMILIES, ScoreSet, compute_scores,
)


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 32-bit child seed for a (seed, tags...) path."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    family: str = "aipw"
    learner: NuisanceLearnerSpec = field(default_factory=NuisanceLearnerSpec)
    nuisance_folds: int = 5
    depth: int = 2
    cost: float = 0.0
    eta: float = DEFAULT_ETA
    delta_min: float = DEFAULT_DELTA_MIN
    gmax: float = DEFAULT_GMAX
    refit_scores_per_fold: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown score family {self.family!r}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.nuisance_folds < 2:
            raise ConfigError("need at least 2 nuisance folds")
        if not 0 < self.eta < 0.5:
            raise ConfigError("eta must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learner"] = self.learner.to_dict()
        return d


@dataclass(frozen=True, eq=False)
class LearnResult:
    policy: TreePolicy
    objective: float
    scores: ScoreSet
    nuisance: CrossFitNuisance


def fit_scores(data: Dataset, config: PipelineConfig, seed: int) -> tuple:
    """Cross-fitted scores on ``data``; returns ``(ScoreSet, CrossFitNuisance)``."""
    folds = assign_folds(data.n, config.nuisance_folds, derive_seed(seed, 1))
    nu = fit_crossfit(data, folds, config.learner, default_targets(config.family), derive_seed(seed, 2))
    scores = compute_scores(config.family, data, nu, config.cost, config.eta,
                            config.delta_min, config.gmax)
    return scores, nu


def learn_policy(data: Dataset, config: PipelineConfig, seed: int = 0) -> LearnResult:
    scores, nu = fit_scores(data, config, seed)
    policy, value = exact_tree_search(data.features, scores, config.depth, data.policy_features)
    return LearnResult(policy, value, scores, nu)
