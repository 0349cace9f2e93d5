import numpy as np
import pytest

from drpolicy.data import Dataset, assign_folds
from drpolicy.nuisance import CrossFitNuisance, NuisanceLearnerSpec


def oracle_nuisance(n, folds=None, **values):
    """CrossFitNuisance holding the given per-row arrays or scalars."""
    preds = {k: np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy() for k, v in values.items()}
    folds = folds or assign_folds(max(n, 2), 2, 0) if n >= 2 else None
    spec = NuisanceLearnerSpec(kind="oracle", oracle={k: 0.0 for k in values})
    return CrossFitNuisance(preds, folds, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def one_row(w, y, z=None, kind="binary"):
    return Dataset(np.zeros((1, 1)), [y], [w], None if z is None else [z], treatment_kind=kind)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
