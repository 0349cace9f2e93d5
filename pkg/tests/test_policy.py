import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drpolicy.errors import ConfigError, DataError
from drpolicy.policy import (
    TreePolicy, assign, brute_force_search, exact_tree_search, objective, plugin_policy, vc_proxy,
)

from conftest import oracle_nuisance


def depth1(j, t, left, right):
    return TreePolicy(1, ((j, t),), (left, right))


def test_assign_examples():
    assert assign(TreePolicy.constant(1), [3.0, -2.0]) == 1
    p = depth1(0, 0.0, 0, 1)
    assert assign(p, [-1.0]) == 0
    assert assign(p, [1.0]) == 1
    assert assign(p, [0.0]) == 0


def test_assign_out_of_range():
    with pytest.raises(DataError):
        assign(depth1(3, 0.0, 0, 1), [1.0, 2.0])


def test_policy_validation_and_json():
    with pytest.raises(DataError):
        TreePolicy(1, (), (0, 1))
    with pytest.raises(DataError):
        TreePolicy(0, (), (2,))
    p = TreePolicy(2, ((1, 0.1), None, (0, -0.3)), (1, 1, 0, 1))
    d = json.loads(p.to_json())
    assert d == {"depth": 2, "leaves": [1, 1, 0, 1],
                 "nodes": [{"feature": 1, "threshold": 0.1}, None, {"feature": 0, "threshold": -0.3}]}
    assert TreePolicy.from_json(p.to_json()) == p
    with pytest.raises(DataError):
        TreePolicy.from_dict({"depth": 1})


def test_threshold_json_round_trip_bit_exact():
    t = 0.1 + 0.2
    p = depth1(0, t, 0, 1)
    assert TreePolicy.from_json(p.to_json()).nodes[0][1] == t


def test_predict_depth2_routing():
    p = TreePolicy(2, ((0, 0.0), (1, 0.0), (1, 1.0)), (0, 1, 1, 0))
    X = np.array([[-1, -1], [-1, 1], [1, 0.5], [1, 2], [0, 0]], dtype=float)
    np.testing.assert_array_equal(p.predict(X), [0, 1, 1, 0, 0])


def test_exact_worked_example():
    pol, val = exact_tree_search(np.array([[0.0], [1.0], [2.0]]), [-1.0, 2.0, -3.0], 1)
    assert pol.nodes == ((0, 1.5),) and pol.leaves == (1, 0)
    assert val == pytest.approx(4 / 3, abs=1e-15)


@pytest.mark.parametrize("depth", [0, 1, 2, 3])
def test_all_positive_treats_everyone(depth):
    rng = np.random.default_rng(depth)
    g = rng.uniform(0.1, 2.0, 15)
    pol, val = exact_tree_search(rng.normal(size=(15, 2)), g, depth)
    assert pol == TreePolicy.constant(1)
    assert val == pytest.approx(g.mean(), abs=1e-12)


def test_depth0():
    pol, val = exact_tree_search(np.zeros((3, 1)), [1.0, -3.0, 1.0], 0)
    assert pol == TreePolicy.constant(0) and val == pytest.approx(1 / 3)
    pol, _ = exact_tree_search(np.zeros((2, 1)), [1.0, -1.0], 0)
    assert pol == TreePolicy.constant(0)


def test_single_observation_and_zero_scores():
    pol, val = brute_force_search(np.array([[0.3, 1.0]]), [5.0], 2)
    assert pol == TreePolicy.constant(1) and val == 5.0
    assert exact_tree_search(np.array([[0.3, 1.0]]), [5.0], 2)[0] == pol
    X = np.random.default_rng(0).normal(size=(10, 2))
    for search in (exact_tree_search, brute_force_search):
        pol, val = search(X, np.zeros(10), 2)
        assert pol == TreePolicy.constant(0) and val == 0.0


def test_brute_force_guard_rails():
    with pytest.raises(ConfigError):
        brute_force_search(np.zeros((31, 1)), np.zeros(31), 1)
    with pytest.raises(ConfigError):
        brute_force_search(np.zeros((5, 5)), np.zeros(5), 1)
    with pytest.raises(ConfigError):
        brute_force_search(np.zeros((5, 1)), np.zeros(5), 3)


def test_search_errors():
    with pytest.raises(ConfigError):
        exact_tree_search(np.zeros((3, 2)), np.zeros(3), -1)
    with pytest.raises(ConfigError):
        exact_tree_search(np.zeros((3, 2)), np.zeros(3), 1, features=[])
    with pytest.raises(DataError):
        exact_tree_search(np.zeros((3, 2)), np.zeros(4), 1)


instances = st.tuples(
    st.integers(1, 12), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2**32 - 1), st.booleans()
)


@settings(max_examples=150, deadline=None)
@given(instances)
def test_exact_matches_brute_force(inst):
    n, p, depth, seed, discrete = inst
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 3, (n, p)).astype(float) if discrete else rng.normal(size=(n, p))
    g = rng.normal(size=n)
    pe, ve = exact_tree_search(X, g, depth)
    pb, vb = brute_force_search(X, g, depth)
    assert abs(ve - vb) <= 1e-12
    assert pe == pb
    assert pe.depth <= depth
    assert abs(objective(pe, X, g) - ve) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_positive_scaling(seed, c):
    rng = np.random.default_rng(seed)
    X, g = rng.normal(size=(40, 3)), rng.normal(size=40)
    p1, v1 = exact_tree_search(X, g, 2)
    p2, v2 = exact_tree_search(X, c * g, 2)
    assert p1 == p2
    assert v2 == pytest.approx(c * v1, rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mask_and_permutation(seed):
    rng = np.random.default_rng(seed)
    X, g = rng.normal(size=(50, 4)), rng.normal(size=50)
    pol, val = exact_tree_search(X, g, 2, features=[1, 3])
    assert pol.split_features <= {1, 3}
    perm = rng.permutation(50)
    _, val_p = exact_tree_search(X[perm], g[perm], 2, features=[1, 3])
    assert val_p == pytest.approx(val, abs=1e-12)


def test_depth3_beats_depth2():
    rng = np.random.default_rng(1)
    X, g = rng.normal(size=(25, 2)), rng.normal(size=25)
    _, v2 = exact_tree_search(X, g, 2)
    p3, v3 = exact_tree_search(X, g, 3)
    assert v3 >= v2 - 1e-12
    assert abs(objective(p3, X, g) - v3) < 1e-12


def test_depth2_larger_instance_is_optimal_among_fixed_roots():
    # every depth-1 tree is also a depth-2 tree
    rng = np.random.default_rng(2)
    X, g = rng.normal(size=(500, 5)), rng.normal(size=500)
    _, v1 = exact_tree_search(X, g, 1)
    _, v2 = exact_tree_search(X, g, 2)
    assert v2 >= v1


def test_plugin_policy():
    nu = oracle_nuisance(2, tau=[0.2, 0.1])
    np.testing.assert_array_equal(plugin_policy(nu, 0.14), [1, 0])
    np.testing.assert_array_equal(plugin_policy(nu, -1e300), [1, 1])
    np.testing.assert_array_equal(plugin_policy(oracle_nuisance(3, tau=0.14), 0.14), [0, 0, 0])
    with pytest.raises(ConfigError):
        plugin_policy(oracle_nuisance(2, f=0.0), 0.0)


def test_vc_proxy_monotone():
    assert vc_proxy(1, 1) == 2 * 3
    for L in range(1, 4):
        for p in range(1, 8):
            assert vc_proxy(L + 1, p) >= vc_proxy(L, p)
            assert vc_proxy(L, p + 1) >= vc_proxy(L, p)
