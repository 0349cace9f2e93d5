"""Shared simulation oracles for the test-suite."""
import numpy as np

from drpolicy.data import Dataset, make_rng


def expit(t):
    return 1.0 / (1.0 + np.exp(-t))


def binary_truth(X):
    """(mu0, tau, e) of the binary confounded design used by several tests."""
    mu0 = X[:, 0] + X[:, 1] ** 2
    tau = 1.0 + X[:, 0]
    e = expit(0.8 * X[:, 0] - 0.5 * X[:, 1])
    return mu0, tau, e


def simulate_binary(n, seed):
    """X ~ N(0, I3), W ~ Bernoulli(e(X)), Y = mu0 + W tau + N(0, 1); the ATE is 1."""
    rng = make_rng(seed, 77)
    X = rng.standard_normal((n, 3))
    mu0, tau, e = binary_truth(X)
    W = (rng.random(n) < e).astype(float)
    Y = mu0 + W * tau + rng.standard_normal(n)
    return Dataset(X, Y, W)


# (criterion, passed, detail) lines printed by the terminal-summary hook
ACCEPTANCE = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed
