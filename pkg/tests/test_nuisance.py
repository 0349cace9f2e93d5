import json

import numpy as np
import pytest

from drpolicy.data import Dataset, TauSpec, assign_folds, simulate_iv
from drpolicy.errors import ConfigError, DataError, NumericError
from drpolicy.forest import ForestParams, fit_honest_forest, fit_knn, safe_ratio
from drpolicy.nuisance import NuisanceLearnerSpec, default_targets, fit_crossfit, fit_holdout

from helpers import simulate_binary


def small_spec(**kw):
    base = dict(num_trees=20, min_leaf=5)
    base.update(kw)
    return NuisanceLearnerSpec(**base)


def test_oracle_passthrough():
    d = simulate_binary(30, 0)
    spec = NuisanceLearnerSpec(kind="oracle", oracle={"f": 1.0, "e": lambda X: np.full(len(X), 0.5), "tau": 0})
    nu = fit_crossfit(d, assign_folds(30, 3, 0), spec, {"f", "e", "tau"})
    np.testing.assert_array_equal(nu["f"], 1.0)
    np.testing.assert_array_equal(nu["e"], 0.5)
    np.testing.assert_array_equal(nu["tau"], 0.0)


def test_oracle_table_follows_rows():
    d = simulate_binary(10, 0)
    table = np.arange(10.0)
    spec = NuisanceLearnerSpec(kind="oracle", oracle={"e": table})
    preds = fit_holdout(d, np.arange(5), np.array([7, 2]), spec, {"e"})
    np.testing.assert_array_equal(preds["e"], [7.0, 2.0])


def test_knn_identity():
    X = np.array([[0.0, 0.0], [1.0, 5.0], [3.0, -2.0]])
    y = np.array([10.0, 20.0, 30.0])
    model = fit_knn(X, y, k=1)
    np.testing.assert_array_equal(model.predict(X[[2, 0]]), [30.0, 10.0])


def test_forest_constant_target():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 4))
    model = fit_honest_forest(X, np.full(300, 5.0), ForestParams(num_trees=10), seed=3)
    np.testing.assert_array_equal(model.predict(rng.normal(size=(50, 4))), 5.0)


def test_forest_single_tree_no_split():
    # with y_i = 2**i the leaf mean times its size is an integer whose set
    # bits name the rows averaged: exactly the 5-row estimation half of a
    # 10-row subsample
    n = 20
    X = np.random.default_rng(2).normal(size=(n, 2))
    y = 2.0 ** np.arange(n)
    model = fit_honest_forest(X, y, ForestParams(num_trees=1, min_leaf=n), seed=5)
    pred = model.predict(X)
    assert np.all(pred == pred[0])
    total = pred[0] * 5
    assert total == int(total)
    assert bin(int(total)).count("1") == 5


def test_forest_step_function():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, size=(2000, 1))
    y = (X[:, 0] > 0).astype(float)
    model = fit_honest_forest(X, y, ForestParams(num_trees=200), seed=1)
    lo, hi = model.predict(np.array([[-0.5], [0.5]]))
    assert abs(lo) < 0.1 and abs(hi - 1) < 0.1


def test_forest_mse_improves_with_n():
    grid = np.linspace(-1, 1, 401)[:, None]
    truth = (grid[:, 0] > 0).astype(float)
    mse = {}
    for n in (500, 4000):
        errs = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.uniform(-1, 1, size=(n, 1))
            y = (X[:, 0] > 0) + rng.normal(scale=0.5, size=n)
            pred = fit_honest_forest(X, y, ForestParams(num_trees=50), seed=seed).predict(grid)
            errs.append(np.mean((pred - truth) ** 2))
        mse[n] = np.mean(errs)
    assert mse[4000] <= mse[500]


def test_forest_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(200, 3)), rng.normal(size=200)
    a = fit_honest_forest(X, y, ForestParams(num_trees=10), seed=7).predict(X)
    b = fit_honest_forest(X, y, ForestParams(num_trees=10), seed=7).predict(X)
    c = fit_honest_forest(X, y, ForestParams(num_trees=10), seed=8).predict(X)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_forest_ratio_mode():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 2))
    den = rng.uniform(0.5, 1.5, 400)
    model = fit_honest_forest(X, np.zeros(400), ForestParams(num_trees=5), seed=0, ratio=(2.5 * den, den))
    np.testing.assert_allclose(model.predict(X), 2.5)


@pytest.mark.parametrize("kw", [dict(num_trees=0), dict(subsample=0.6), dict(subsample=0), dict(min_leaf=0), dict(mtry=0)])
def test_forest_params_invalid(kw):
    with pytest.raises(ConfigError):
        ForestParams(**kw)


def test_forest_too_few_rows():
    with pytest.raises(DataError):
        fit_honest_forest(np.zeros((3, 1)), np.zeros(3), ForestParams(subsample=0.5), seed=0)


def test_safe_ratio():
    np.testing.assert_array_equal(safe_ratio([1.0, 2.0], [0.0, 4.0]), [0.0, 0.5])


def test_spec_json_round_trip():
    spec = NuisanceLearnerSpec(kind="knn", k=7)
    d = json.loads(spec.to_json())
    assert set(d) == {"kind", "num_trees", "subsample", "min_leaf", "mtry", "k"}
    assert NuisanceLearnerSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ConfigError):
        NuisanceLearnerSpec.from_dict({"kind": "knn", "depth": 3})


@pytest.mark.parametrize("kw", [dict(kind="svm"), dict(kind="knn", k=0), dict(kind="oracle"), dict(subsample=0.7)])
def test_spec_invalid(kw):
    with pytest.raises(ConfigError):
        NuisanceLearnerSpec(**kw)


def test_out_of_fold_purity():
    # changing the outcomes of fold k must not change fold k's own predictions
    d = simulate_binary(200, 2)
    folds = assign_folds(200, 4, 1)
    spec = small_spec()
    nu = fit_crossfit(d, folds, spec, {"f"}, seed=3)
    k = 2
    y2 = d.outcome.copy()
    y2[folds.members(k)] += 100.0
    d2 = Dataset(d.features, y2, d.treatment)
    nu2 = fit_crossfit(d2, folds, spec, {"f"}, seed=3)
    np.testing.assert_array_equal(nu["f"][folds.members(k)], nu2["f"][folds.members(k)])
    assert not np.array_equal(nu["f"][folds.members(1)], nu2["f"][folds.members(1)])


def test_crossfit_targets_and_ranges():
    d, _ = simulate_iv(600, TauSpec("product"), 1)
    folds = assign_folds(d.n, 3, 0)
    nu = fit_crossfit(d, folds, small_spec(), default_targets("iv"), seed=0)
    assert nu.tau_mode == "iv"
    for t in ("f", "e", "tau", "z", "delta"):
        assert nu[t].shape == (600,) and np.all(np.isfinite(nu[t]))
    assert np.all((nu["e"] >= 0) & (nu["e"] <= 1))
    assert np.all((nu["z"] >= 0) & (nu["z"] <= 1))
    # compliance is about E[expit(eps + x4)] ~ 0.5 on average
    assert 0.3 < nu["delta"].mean() < 0.7


def test_crossfit_thread_count_irrelevant(monkeypatch):
    d = simulate_binary(300, 3)
    folds = assign_folds(300, 3, 2)
    monkeypatch.setenv("DRPOLICY_THREADS", "1")
    a = fit_crossfit(d, folds, small_spec(), {"f", "e", "tau"}, seed=5)
    monkeypatch.setenv("DRPOLICY_THREADS", "3")
    b = fit_crossfit(d, folds, small_spec(), {"f", "e", "tau"}, seed=5)
    for t in ("f", "e", "tau"):
        np.testing.assert_array_equal(a[t], b[t])


def test_robinson_tau_recovers_effect():
    d = simulate_binary(3000, 4)
    nu = fit_crossfit(d, assign_folds(d.n, 3, 0), NuisanceLearnerSpec(num_trees=50), {"f", "e", "tau"}, 0)
    tau = 1.0 + d.features[:, 0]
    assert np.corrcoef(nu["tau"], tau)[0, 1] > 0.7
    assert abs(nu["tau"].mean() - 1.0) < 0.2


def test_continuous_density_targets():
    rng = np.random.default_rng(6)
    n = 1000
    X = rng.normal(size=(n, 2))
    W = X[:, 0] + 0.5 * rng.normal(size=n)
    d = Dataset(X, W + rng.normal(size=n), W, treatment_kind="continuous")
    nu = fit_crossfit(d, assign_folds(n, 2, 0), small_spec(), default_targets("continuous"), 0)
    assert np.all(nu["sigma_w"] >= 1e-3)
    assert np.corrcoef(nu["mu_w"], X[:, 0])[0, 1] > 0.9


def test_knn_crossfit_runs():
    d = simulate_binary(100, 5)
    nu = fit_crossfit(d, assign_folds(100, 2, 0), NuisanceLearnerSpec(kind="knn", k=5), {"f", "e", "tau"})
    assert np.all(np.isfinite(nu["tau"]))


def test_degenerate_fold_named():
    X = np.arange(8.0)[:, None]
    W = np.array([1, 1, 1, 1, 0, 0, 0, 0.0])
    d = Dataset(X, np.zeros(8), W)
    folds = assign_folds(8, 2, 0)
    folds = type(folds)(np.where(W == 0, 1, 2), 2)
    with pytest.raises(NumericError, match="fold 1.*all-treated"):
        fit_crossfit(d, folds, small_spec(num_trees=2, min_leaf=1), {"f", "e"})


def test_target_errors():
    d = simulate_binary(20, 0)
    folds = assign_folds(20, 2, 0)
    with pytest.raises(DataError, match="instrument"):
        fit_crossfit(d, folds, small_spec(), {"z"})
    with pytest.raises(ConfigError):
        fit_crossfit(d, folds, small_spec(), {"g"})
    with pytest.raises(DataError):
        fit_crossfit(d, folds, small_spec(), {"mu_w"})
    with pytest.raises(DataError):
        fit_crossfit(d, assign_folds(10, 2, 0), small_spec(), {"f"})
    with pytest.raises(ConfigError):
        fit_crossfit(d, folds, NuisanceLearnerSpec(kind="oracle", oracle={"f": 0}), {"f", "e"})
