import math

import numpy as np
import pytest

from drpolicy.data import (
    CsvSchema, Dataset, TauSpec, assign_folds, load_csv, simulate_ambiguous, simulate_iv, write_csv,
)
from drpolicy.errors import ConfigError, DataError


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_rows(tmp_path):
    f = write(tmp_path / "d.csv", "y,w,x1\n1.5,1,0.1\n2,0,0.2\n-3,1,0.3\n")
    d = load_csv(f, CsvSchema(outcome="y", treatment="w"))
    assert (d.n, d.p) == (3, 1)
    assert not d.has_instrument
    np.testing.assert_array_equal(d.outcome, [1.5, 2, -3])
    np.testing.assert_array_equal(d.features[:, 0], [0.1, 0.2, 0.3])


def test_binary_violation_names_row(tmp_path):
    f = write(tmp_path / "d.csv", "y,w,x1\n1,1,0\n1,0.5,0\n")
    with pytest.raises(DataError, match="binary violation at row 2"):
        load_csv(f)


def test_instrument_bit_exact(tmp_path):
    d0, _ = simulate_iv(50, TauSpec("product"), 3)
    f = tmp_path / "iv.csv"
    write_csv(d0, f)
    d = load_csv(f, CsvSchema(instrument="z"))
    assert d.has_instrument
    np.testing.assert_array_equal(d.instrument, d0.instrument)
    np.testing.assert_array_equal(d.features, d0.features)
    np.testing.assert_array_equal(d.outcome, d0.outcome)


def test_round_trip_precision(tmp_path):
    f = write(tmp_path / "a.csv", "y,w,a,b\n0.1234567890123456,1,1e-300,3.141592653589793\n2,0,-7.5,1e10\n")
    d = load_csv(f)
    g = tmp_path / "b.csv"
    write_csv(d, g)
    d2 = load_csv(g)
    np.testing.assert_array_equal(d2.features, d.features)
    np.testing.assert_array_equal(d2.outcome, d.outcome)
    assert d2.feature_names == ("a", "b")


@pytest.mark.parametrize("text,msg", [
    ("y,w\n1,1\n", "no feature columns"),
    ("y,x\n1,1\n", "missing column 'w'"),
    ("y,w,x\n1,1,abc\n", "row 1, column 'x'"),
    ("y,w,x\n", "no data rows"),
    ("y,w,x\n1,1\n", "row 1 has 2 fields"),
    ("y,w,x\n1,1,nan\n", "non-finite value at row 1"),
])
def test_load_errors(tmp_path, text, msg):
    with pytest.raises(DataError, match=msg):
        load_csv(write(tmp_path / "d.csv", text))


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "absent.csv")


def test_schema_parse(tmp_path):
    s = CsvSchema.parse("outcome=out;treatment=t;instrument=inst;features=a,b;policy_features=b")
    assert s.features == ["a", "b"] and s.instrument == "inst" and s.policy_features == ["b"]
    f = write(tmp_path / "d.csv", "out,t,inst,a,b,c\n1,1,0,5,6,7\n2,0,1,8,9,10\n")
    d = load_csv(f, s)
    assert d.p == 2 and d.policy_features == (1,)
    with pytest.raises(ConfigError):
        CsvSchema.parse("nonsense")
    with pytest.raises(ConfigError):
        CsvSchema.parse("colour=red")


def test_continuous_treatment_allowed(tmp_path):
    f = write(tmp_path / "d.csv", "y,w,x\n1,0.5,0\n2,1.7,1\n")
    d = load_csv(f, CsvSchema(treatment_kind="continuous"))
    np.testing.assert_array_equal(d.treatment, [0.5, 1.7])


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1)), [1, 2], [0, 1, 0])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [1, 2], [0, 1], policy_features=(2,))
    d = Dataset(np.arange(6.0).reshape(3, 2), [1, 2, 3], [0, 1, 0])
    assert d.policy_features == (0, 1)
    assert d.with_policy_features(["x2"]).policy_features == (1,)
    sub = d.subset([2, 0])
    np.testing.assert_array_equal(sub.row_index, [2, 0])
    with pytest.raises(ValueError):
        d.features[0, 0] = 9.0


def test_folds_balanced():
    f = assign_folds(10, 5, 1)
    assert list(f.sizes()) == [2] * 5
    assert sorted(assign_folds(7, 2, 4).sizes()) == [3, 4]
    np.testing.assert_array_equal(assign_folds(7, 2, 4).fold_of, assign_folds(7, 2, 4).fold_of)
    assert set(f.fold_of) == set(range(1, 6))


@pytest.mark.parametrize("n,K", [(3, 4), (5, 1)])
def test_folds_invalid(n, K):
    with pytest.raises(ConfigError):
        assign_folds(n, K, 0)


def test_simulate_iv_moments():
    d, tau = simulate_iv(100_000, TauSpec("product"), 0)
    assert abs(d.instrument.mean() - 0.5) < 0.01
    X = d.features
    assert abs(np.maximum(X[:, 2] + X[:, 3], 0).mean() - 1 / math.sqrt(math.pi)) < 0.01
    np.testing.assert_array_equal(np.abs(tau), 0.5)
    assert np.all(d.treatment <= d.instrument)
    assert d.p == 10


def test_simulators_deterministic():
    a, ta = simulate_iv(200, TauSpec("additive"), 9)
    b, tb = simulate_iv(200, TauSpec("additive"), 9)
    np.testing.assert_array_equal(a.outcome, b.outcome)
    np.testing.assert_array_equal(ta, tb)
    c = simulate_ambiguous(100, 3, 1.0, 2)
    e = simulate_ambiguous(100, 3, 1.0, 2)
    np.testing.assert_array_equal(c.outcome, e.outcome)
    assert not np.array_equal(simulate_ambiguous(100, 3, 1.0, 3).outcome, c.outcome)


def test_tau_specs():
    X = np.array([[1.0, 2.0] + [0] * 8, [-1.0, 2.0] + [0] * 8, [-1.0, -1.0] + [0] * 8])
    np.testing.assert_allclose(TauSpec("additive")(X), [1.0, 0.5, -0.5])
    np.testing.assert_allclose(TauSpec("product")(X), [0.5, -0.5, 0.5])
    with pytest.raises(ConfigError):
        TauSpec("cubic")
    assert TauSpec("custom", lambda X: X[:, 0])(X)[0] == 1.0


def test_ambiguous_zero_effect():
    n = 10_000
    d = simulate_ambiguous(n, 2, 0.0, 1)
    assert abs(d.outcome.mean()) < 3 / math.sqrt(n)
    assert abs(d.treatment.mean() - 0.5) < 0.02
    assert d.features.min() >= -0.5 and d.features.max() <= 0.5


def test_ambiguous_slope():
    n = 10_000
    d = simulate_ambiguous(n, 2, 1.0, 5)
    # sign(x1) enters multiplied by (W - 0.5): regress Y on (W - 0.5) sign(x1)
    x = (d.treatment - 0.5) * np.sign(d.features[:, 0])
    slope = x @ d.outcome / (x @ x)
    resid = d.outcome - slope * x
    se = math.sqrt(resid.var() / (x @ x))
    assert abs(slope - 1 / math.sqrt(n)) < 3 * se
