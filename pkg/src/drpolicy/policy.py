"""Tree policies and exact maximisation of the signed-score objective.

The objective of a policy ``pi`` is ``mean((2 pi(X_i) - 1) Gamma_i)``.  Trees
route ``x[feature] <= threshold`` to the left.  Candidate thresholds at a node
are midpoints between consecutive distinct values of the observations that
reach that node.

Ties are broken by a fixed total order on trees: a leaf precedes any split,
action 0 precedes action 1, and splits compare by (feature, threshold, left
subtree, right subtree).  Objectives within ``TIE_RTOL * sum|Gamma|`` of the
maximum count as tied.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .errors import ConfigError, DataError
from .nuisance import CrossFitNuisance
from .scores import ScoreSet

TIE_RTOL = 1e-10

BRUTE_MAX_N = 30
BRUTE_MAX_P = 4
BRUTE_MAX_DEPTH = 2


@dataclass(frozen=True)
class TreePolicy:
    """Complete binary tree stored breadth-first.

    ``nodes`` has ``2**depth - 1`` entries, each ``(feature, threshold)`` or
    ``None``; a ``None`` node has identical actions below it and routes left.
    ``leaves`` has ``2**depth`` actions in {0, 1}.  Features are 0-based
    column indices.
    """

    depth: int
    nodes: Tuple[Optional[Tuple[int, float]], ...]
    leaves: Tuple[int, ...]

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if len(self.nodes) != 2**self.depth - 1 or len(self.leaves) != 2**self.depth:
            raise DataError("node/leaf counts do not match the depth")
        if any(a not in (0, 1) for a in self.leaves):
            raise DataError("leaf actions must be 0 or 1")
        nodes = tuple(None if nd is None else (int(nd[0]), float(nd[1])) for nd in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "leaves", tuple(int(a) for a in self.leaves))

    @classmethod
    def constant(cls, action: int) -> "TreePolicy":
        return cls(0, (), (int(action),))

    @property
    def split_features(self) -> set:
        return {nd[0] for nd in self.nodes if nd is not None}

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        needed = max(self.split_features, default=-1) + 1
        if X.shape[1] < needed:
            raise DataError(f"policy splits on feature {needed - 1} but x has {X.shape[1]} entries")
        pos = np.zeros(X.shape[0], dtype=np.int64)
        for level in range(self.depth):
            first = 2**level - 1
            step = np.zeros(X.shape[0], dtype=np.int64)
            for q in range(2**level):
                nd = self.nodes[first + q]
                if nd is None:
                    continue
                rows = pos == q
                step[rows] = X[rows, nd[0]] > nd[1]
            pos = 2 * pos + step
        return np.asarray(self.leaves, dtype=np.int64)[pos]

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "nodes": [None if nd is None else {"feature": nd[0], "threshold": nd[1]} for nd in self.nodes],
            "leaves": list(self.leaves),
        }

    @classmethod
    def from_dict(cls, d) -> "TreePolicy":
        try:
            nodes = [None if nd is None else (nd["feature"], nd["threshold"]) for nd in d["nodes"]]
            return cls(int(d["depth"]), tuple(nodes), tuple(d["leaves"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed policy JSON: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TreePolicy":
        return cls.from_dict(json.loads(text))


def assign(policy: TreePolicy, x) -> int:
    """Action for a single feature vector."""
    return int(policy.predict(np.asarray(x, dtype=float).reshape(1, -1))[0])


# Search-time trees are nested tuples: ("leaf", a) or ("split", j, t, left, right).
# Comparing ``_key`` values reproduces the documented tie-break order.

def _key(tree):
    if tree[0] == "leaf":
        return (0, tree[1])
    return (1, tree[1], tree[2], _key(tree[3]), _key(tree[4]))


def _collapse(tree):
    if tree[0] == "leaf":
        return tree
    left, right = _collapse(tree[3]), _collapse(tree[4])
    if left[0] == "leaf" and left == right:
        return left
    return ("split", tree[1], tree[2], left, right)


def _height(tree):
    return 0 if tree[0] == "leaf" else 1 + max(_height(tree[3]), _height(tree[4]))


def to_policy(tree) -> TreePolicy:
    tree = _collapse(tree)
    depth = _height(tree)
    nodes = [None] * (2**depth - 1)
    leaves = [0] * (2**depth)

    def fill(t, level, q):
        if t[0] == "leaf":
            span = 2 ** (depth - level)
            leaves[q * span:(q + 1) * span] = [t[1]] * span
            return
        nodes[2**level - 1 + q] = (t[1], t[2])
        fill(t[3], level + 1, 2 * q)
        fill(t[4], level + 1, 2 * q + 1)

    fill(tree, 0, 0)
    return TreePolicy(depth, tuple(nodes), tuple(leaves))


def _midpoint(a: float, b: float) -> float:
    t = a + (b - a) / 2
    return t if a <= t < b else a


def objective(policy: TreePolicy, X, gamma) -> float:
    """``mean((2 pi(X_i) - 1) Gamma_i)``."""
    g = _gamma_array(gamma)
    return float(np.mean((2 * policy.predict(X) - 1) * g))


def _gamma_array(gamma) -> np.ndarray:
    return np.asarray(gamma.gamma if isinstance(gamma, ScoreSet) else gamma, dtype=float).reshape(-1)


def _prepare(X, gamma, depth, features):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    g = _gamma_array(gamma)
    if X.shape[0] < 1 or X.shape[0] != g.shape[0]:
        raise DataError(f"X has {X.shape[0]} rows, gamma has {g.shape[0]} entries")
    if not isinstance(depth, (int, np.integer)) or depth < 0:
        raise ConfigError(f"depth must be a non-negative integer, got {depth}")
    feats = list(range(X.shape[1])) if features is None else sorted(set(int(j) for j in features))
    if not feats:
        raise ConfigError("empty policy feature mask")
    if feats[0] < 0 or feats[-1] >= X.shape[1]:
        raise DataError(f"policy feature mask {feats} out of range for {X.shape[1]} columns")
    tol = TIE_RTOL * float(np.abs(g).sum())
    return X, g, feats, tol


# ---------------------------------------------------------------------------
# exact search

@njit(cache=True)
def _block_stats(vals, valid, bmax, bmin, b, bs, size):
    hi, lo = -np.inf, np.inf
    for m in range(b * bs, min((b + 1) * bs, size)):
        if valid[m]:
            v = vals[m]
            if v > hi:
                hi = v
            if v < lo:
                lo = v
    bmax[b] = hi
    bmin[b] = lo


@njit(cache=True)
def _suffix_add(vals, valid, badd, bmax, bmin, start, delta, bs):
    size = vals.shape[0]
    if start >= size:
        return
    b0 = start // bs
    for m in range(start, min((b0 + 1) * bs, size)):
        vals[m] += delta
    _block_stats(vals, valid, bmax, bmin, b0, bs, size)
    for b in range(b0 + 1, badd.shape[0]):
        badd[b] += delta


@njit(cache=True)
def _root_scan(order_j, root_valid, ranks, valid, prefix_all, g, total):
    """Best depth-1 value of the left and right part of every root split on
    one feature, maximised over all candidate second-level features.

    A depth-1 tree on a set with sum ``S`` is worth
    ``max(2 max_m A_m - S, S - 2 min_m A_m)`` where ``A_m`` runs over prefix
    sums at admissible boundaries (including the empty and full prefix).
    """
    n = order_j.shape[0]
    q = ranks.shape[0]
    size = n + 1
    bs = max(8, int(np.sqrt(size)))
    nb = (size + bs - 1) // bs
    left = np.full(n, -np.inf)
    right = np.full(n, -np.inf)
    for k in range(q):
        va = np.zeros(size)
        vb = prefix_all[k].copy()
        adda = np.zeros(nb)
        addb = np.zeros(nb)
        maxa = np.empty(nb)
        mina = np.empty(nb)
        maxb = np.empty(nb)
        minb = np.empty(nb)
        vk = valid[k]
        for b in range(nb):
            _block_stats(va, vk, maxa, mina, b, bs, size)
            _block_stats(vb, vk, maxb, minb, b, bs, size)
        s_left = 0.0
        for r in range(1, n):
            i = order_j[r - 1]
            gi = g[i]
            s_left += gi
            start = ranks[k, i] + 1
            _suffix_add(va, vk, adda, maxa, mina, start, gi, bs)
            _suffix_add(vb, vk, addb, maxb, minb, start, -gi, bs)
            if not root_valid[r]:
                continue
            hia, loa, hib, lob = -np.inf, np.inf, -np.inf, np.inf
            for b in range(nb):
                t = maxa[b] + adda[b]
                if t > hia:
                    hia = t
                t = mina[b] + adda[b]
                if t < loa:
                    loa = t
                t = maxb[b] + addb[b]
                if t > hib:
                    hib = t
                t = minb[b] + addb[b]
                if t < lob:
                    lob = t
            s_right = total - s_left
            lv = max(2 * hia - s_left, s_left - 2 * loa)
            rv = max(2 * hib - s_right, s_right - 2 * lob)
            if lv > left[r]:
                left[r] = lv
            if rv > right[r]:
                right[r] = rv
    return left, right


def _depth1_table(X, g, feats):
    """All depth-1 candidates on a set, in tie-break order.

    Returns (values, builders) where values[c] is the summed objective.
    Order: leaf 0, leaf 1, then per feature, threshold, action pair.
    """
    S = g.sum()
    vals = [np.array([-S, S])]
    specs = [None]
    for j in feats:
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cut = np.flatnonzero(xs[1:] > xs[:-1])
        if cut.size == 0:
            continue
        P = np.cumsum(g[order])[cut]
        Q = S - P
        vals.append(np.stack([-P - Q, -P + Q, P - Q, P + Q], axis=1).ravel())
        specs.append((j, xs[cut], xs[cut + 1]))
    return np.concatenate(vals), specs


def _depth1_build(specs, c):
    if c < 2:
        return ("leaf", int(c))
    c -= 2
    for spec in specs[1:]:
        j, lo, hi = spec
        if c < 4 * lo.size:
            b, a = divmod(c, 4)
            return ("split", j, _midpoint(float(lo[b]), float(hi[b])), ("leaf", a // 2), ("leaf", a % 2))
        c -= 4 * lo.size
    raise IndexError(c)


def _depth1_best(X, g, feats):
    vals, _ = _depth1_table(X, g, feats)
    return float(vals.max())


def _depth1_select(X, g, feats, need):
    vals, specs = _depth1_table(X, g, feats)
    ok = np.flatnonzero(vals >= need)
    if ok.size == 0:
        return None, -np.inf
    c = int(ok[0])
    return _depth1_build(specs, c), float(vals[c])


class _Depth2:
    """Root-scan tables for the exact depth-2 search on a point set."""

    def __init__(self, X, g, feats):
        self.X, self.g, self.feats = X, g, feats
        n = X.shape[0]
        Xs = X[:, feats]
        orders = np.argsort(Xs, axis=0, kind="stable").T.copy()
        q = len(feats)
        ranks = np.empty((q, n), dtype=np.int64)
        valid = np.zeros((q, n + 1), dtype=np.bool_)
        prefix = np.zeros((q, n + 1))
        self.sorted = []
        for k in range(q):
            ranks[k, orders[k]] = np.arange(n)
            xs = Xs[orders[k], k]
            self.sorted.append(xs)
            valid[k, 0] = valid[k, n] = True
            valid[k, 1:n] = xs[1:] > xs[:-1]
            prefix[k, 1:] = np.cumsum(g[orders[k]])
        self.orders, self.valid = orders, valid
        self.S = float(g.sum())
        self.left, self.right = [], []
        for j in range(q):
            lv, rv = _root_scan(orders[j], valid[j], ranks, valid, prefix, g, self.S)
            self.left.append(lv)
            self.right.append(rv)
        best = abs(self.S)
        for lv, rv in zip(self.left, self.right):
            if n > 1:
                best = max(best, float(np.max(lv + rv)))
        self.best = best

    def select(self, need):
        for a in (0, 1):
            if (2 * a - 1) * self.S >= need:
                return ("leaf", a), (2 * a - 1) * self.S
        X, g, feats = self.X, self.g, self.feats
        n = X.shape[0]
        for jj, j in enumerate(feats):
            tot = self.left[jj] + self.right[jj]
            for r in np.flatnonzero(tot >= need):
                rows_l = self.orders[jj][:r]
                rows_r = self.orders[jj][r:]
                lbest = _depth1_best(X[rows_l], g[rows_l], feats)
                rbest = _depth1_best(X[rows_r], g[rows_r], feats)
                if lbest + rbest < need:
                    continue
                lt, lval = _depth1_select(X[rows_l], g[rows_l], feats, need - rbest)
                rt, rval = _depth1_select(X[rows_r], g[rows_r], feats, need - lval)
                xs = self.sorted[jj]
                t = _midpoint(float(xs[r - 1]), float(xs[r]))
                return ("split", j, t, lt, rt), lval + rval
        return None, -np.inf


def _best_value(X, g, feats, depth):
    if depth == 0:
        return abs(float(g.sum()))
    if depth == 1:
        return _depth1_best(X, g, feats)
    if depth == 2:
        return _Depth2(X, g, feats).best
    best = abs(float(g.sum()))
    for j, t, lrows, rrows in _splits(X, feats):
        best = max(best, _best_value(X[lrows], g[lrows], feats, depth - 1)
                   + _best_value(X[rrows], g[rrows], feats, depth - 1))
    return best


def _splits(X, feats):
    for j in feats:
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        for r in np.flatnonzero(xs[1:] > xs[:-1]) + 1:
            yield j, _midpoint(float(xs[r - 1]), float(xs[r])), order[:r], order[r:]


def _select(X, g, feats, depth, need):
    S = float(g.sum())
    if depth == 0:
        for a in (0, 1):
            if (2 * a - 1) * S >= need:
                return ("leaf", a), (2 * a - 1) * S
        return None, -np.inf
    if depth == 1:
        return _depth1_select(X, g, feats, need)
    if depth == 2:
        return _Depth2(X, g, feats).select(need)
    for a in (0, 1):
        if (2 * a - 1) * S >= need:
            return ("leaf", a), (2 * a - 1) * S
    for j, t, lrows, rrows in _splits(X, feats):
        rbest = _best_value(X[rrows], g[rrows], feats, depth - 1)
        lbest = _best_value(X[lrows], g[lrows], feats, depth - 1)
        if lbest + rbest < need:
            continue
        lt, lval = _select(X[lrows], g[lrows], feats, depth - 1, need - rbest)
        rt, rval = _select(X[rrows], g[rrows], feats, depth - 1, need - lval)
        return ("split", j, t, lt, rt), lval + rval
    return None, -np.inf


def exact_tree_search(X, gamma, depth: int, features: Optional[Sequence[int]] = None):
    """Globally optimal tree of depth at most ``depth``.

    Parameters
    ----------
    X : array, shape (n, p)
    gamma : ScoreSet or array of length n
    depth : int
        0, 1 and 2 use dedicated exact solvers; deeper trees fall back to a
        (slow) exact recursion.
    features : sequence of int, optional
        Columns the tree may split on; defaults to all.

    Returns
    -------
    (TreePolicy, float)
        The maximiser and its objective ``mean((2 pi - 1) Gamma)``.
    """
    X, g, feats, tol = _prepare(X, gamma, depth, features)
    if depth == 2:
        solver = _Depth2(X, g, feats)
        tree, _ = solver.select(solver.best - tol)
    else:
        best = _best_value(X, g, feats, depth)
        tree, _ = _select(X, g, feats, depth, best - tol)
    policy = to_policy(tree)
    return policy, objective(policy, X, g)


# ---------------------------------------------------------------------------
# brute force oracle

def _enumerate(X, g, feats, rows, depth):
    """Objective of every tree on ``rows`` in tie-break order.

    Returns (values, build) with ``build(c)`` giving the c-th tree.  Each
    tree's value is accumulated leaf by leaf from the rows it routes there.
    """
    S = float(g[rows].sum())
    leaf_vals = np.array([-S, S])
    if depth == 0 or rows.size == 0:
        return leaf_vals, lambda c: ("leaf", int(c))
    blocks = [leaf_vals]
    parts = []
    for j in feats:
        xs = np.unique(X[rows, j])
        for lo, hi in zip(xs[:-1], xs[1:]):
            t = _midpoint(float(lo), float(hi))
            goes_left = X[rows, j] <= t
            lv, lb = _enumerate(X, g, feats, rows[goes_left], depth - 1)
            rv, rb = _enumerate(X, g, feats, rows[~goes_left], depth - 1)
            blocks.append((lv[:, None] + rv[None, :]).ravel())
            parts.append((j, t, lb, rb, rv.size, blocks[-1].size))

    def build(c):
        if c < 2:
            return ("leaf", int(c))
        c -= 2
        for j, t, lb, rb, nr, size in parts:
            if c < size:
                a, b = divmod(c, nr)
                return ("split", j, t, lb(a), rb(b))
            c -= size
        raise IndexError(c)

    return np.concatenate(blocks), build


def brute_force_search(X, gamma, depth: int, features: Optional[Sequence[int]] = None):
    """Exhaustive enumeration of every tree of depth at most ``depth``.

    Guard rails: ``n <= 30``, ``p <= 4``, ``depth <= 2``.
    """
    X, g, feats, tol = _prepare(X, gamma, depth, features)
    n, p = X.shape
    if n > BRUTE_MAX_N or len(feats) > BRUTE_MAX_P or depth > BRUTE_MAX_DEPTH:
        raise ConfigError(
            f"brute force limited to n <= {BRUTE_MAX_N}, p <= {BRUTE_MAX_P}, depth <= {BRUTE_MAX_DEPTH}"
        )
    vals, build = _enumerate(X, g, feats, np.arange(n), depth)
    c = int(np.flatnonzero(vals >= vals.max() - tol)[0])
    policy = to_policy(build(c))
    return policy, objective(policy, X, g)


def plugin_policy(nu: CrossFitNuisance, C: float) -> np.ndarray:
    """Treat exactly where the cross-fitted effect estimate exceeds the cost."""
    return (nu["tau"] > C).astype(np.int64)


def vc_proxy(depth: int, p: int) -> float:
    """Complexity proxy ``2**L (log2 p + L + 2)`` for depth-``L`` trees on ``p`` features."""
    return 2**depth * (math.log2(p) + depth + 2)
