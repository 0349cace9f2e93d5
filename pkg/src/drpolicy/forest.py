"""Honest regression forests and a k-nearest-neighbour learner.

Both learners predict a ratio of local averages ``mean(num) / mean(den)``.
Plain regression uses ``num = y`` and ``den = 1``; the treatment-effect fits
pass residual products so the same code yields local Robinson or local IV
estimates.

Forest trees split on quantile bins (at most ``MAX_BINS`` per feature,
computed once per forest from the training features) by weighted
squared-error reduction.  Each tree draws a subsample without replacement,
chooses splits on one half and computes leaf statistics on the other.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from sklearn.neighbors import NearestNeighbors

from .errors import ConfigError, DataError

_TINY = 1e-12
MAX_BINS = 64


def max_threads() -> int:
    """Parallelism cap, read from ``DRPOLICY_THREADS`` (default: CPU count)."""
    raw = os.environ.get("DRPOLICY_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"DRPOLICY_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``num / den`` with 0 wherever ``|den|`` is numerically zero."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    ok = np.abs(den) > _TINY
    np.divide(num, den, out=out, where=ok)
    return out


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 100
    subsample: float = 0.5
    min_leaf: int = 5
    mtry: Optional[int] = None

    def __post_init__(self):
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if not 0 < self.subsample <= 0.5:
            raise ConfigError("subsample must lie in (0, 0.5]")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return min(p, math.ceil(math.sqrt(p)) + 20)
        return min(p, self.mtry)


def _bin_edges(X: np.ndarray) -> np.ndarray:
    p = X.shape[1]
    edges = np.full((p, MAX_BINS - 1), np.inf)
    qs = np.linspace(0, 1, MAX_BINS + 1)[1:-1]
    for j in range(p):
        e = np.unique(np.quantile(X[:, j], qs, method="lower"))
        e = e[e < X[:, j].max()]
        edges[j, : e.size] = e
    return edges


def _binned(X: np.ndarray, edges: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        out[:, j] = np.searchsorted(edges[j], X[:, j], side="left")
    return out


@njit(cache=True, nogil=True)
def _grow(Xb, target, weight, rows, min_leaf, mtry, nbins,
          feat, split, left, right, parent):
    """Grow one tree on ``rows``; returns the node count.  Node 0 is the root."""
    m_all = rows.shape[0]
    p = Xb.shape[1]
    start = np.empty(feat.shape[0], dtype=np.int64)
    stop = np.empty(feat.shape[0], dtype=np.int64)
    start[0], stop[0] = 0, m_all
    parent[0] = -1
    count = 1
    stack = [0]
    hw = np.empty(nbins)
    hy = np.empty(nbins)
    hc = np.empty(nbins, dtype=np.int64)
    cand = np.arange(p)
    while len(stack) > 0:
        node = stack.pop()
        feat[node] = -1
        left[node] = -1
        right[node] = -1
        a, b = start[node], stop[node]
        m = b - a
        if m < 2 * min_leaf:
            continue
        tw = 0.0
        ty = 0.0
        for r in range(a, b):
            i = rows[r]
            tw += weight[i]
            ty += weight[i] * target[i]
        if tw <= 0.0:
            continue
        base = ty * ty / tw
        best_gain = 1e-12 * (abs(base) + 1e-300)
        best_f = -1
        best_b = -1
        # partial Fisher-Yates draw of mtry candidate features
        for q in range(mtry):
            s = q + np.random.randint(p - q)
            cand[q], cand[s] = cand[s], cand[q]
        for q in range(mtry):
            j = cand[q]
            hw[:] = 0.0
            hy[:] = 0.0
            hc[:] = 0
            for r in range(a, b):
                i = rows[r]
                k = Xb[i, j]
                hw[k] += weight[i]
                hy[k] += weight[i] * target[i]
                hc[k] += 1
            lw = 0.0
            ly = 0.0
            lc = 0
            for k in range(nbins - 1):
                lw += hw[k]
                ly += hy[k]
                lc += hc[k]
                if hc[k] == 0:
                    continue
                if lc < min_leaf:
                    continue
                if m - lc < min_leaf:
                    break
                rw = tw - lw
                if lw <= 0.0 or rw <= 0.0:
                    continue
                ry = ty - ly
                gain = ly * ly / lw + ry * ry / rw - base
                if gain > best_gain:
                    best_gain = gain
                    best_f = j
                    best_b = k
        if best_f < 0:
            continue
        # partition rows[a:b] by the chosen split
        lo, hi = a, b - 1
        while lo <= hi:
            if Xb[rows[lo], best_f] <= best_b:
                lo += 1
            else:
                rows[lo], rows[hi] = rows[hi], rows[lo]
                hi -= 1
        feat[node] = best_f
        split[node] = best_b
        for side in range(2):
            c = count
            count += 1
            parent[c] = node
            if side == 0:
                left[node] = c
                start[c], stop[c] = a, lo
            else:
                right[node] = c
                start[c], stop[c] = lo, b
            stack.append(c)
    return count


@njit(cache=True, nogil=True)
def _route(Xb, i, feat, split, left, right):
    node = 0
    while feat[node] >= 0:
        if Xb[i, feat[node]] <= split[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True, nogil=True)
def _fit_forest(Xb, target, weight, num, den, seeds, n_sub, min_leaf, mtry, nbins):
    n = Xb.shape[0]
    T = seeds.shape[0]
    half = n_sub // 2
    max_nodes = 2 * half + 1
    feat = np.full((T, max_nodes), -1, dtype=np.int64)
    split = np.zeros((T, max_nodes), dtype=np.int64)
    left = np.full((T, max_nodes), -1, dtype=np.int64)
    right = np.full((T, max_nodes), -1, dtype=np.int64)
    vnum = np.zeros((T, max_nodes))
    vden = np.zeros((T, max_nodes))
    parent = np.empty(max_nodes, dtype=np.int64)
    cnt = np.empty(max_nodes)
    for t in range(T):
        np.random.seed(seeds[t])
        perm = np.random.permutation(n)[:n_sub]
        struct = perm[:half].copy()
        est = perm[half:]
        nodes = _grow(Xb, target, weight, struct, min_leaf, mtry, nbins,
                      feat[t], split[t], left[t], right[t], parent)
        cnt[:nodes] = 0.0
        for i in est:
            leaf = _route(Xb, i, feat[t], split[t], left[t], right[t])
            cnt[leaf] += 1.0
            vnum[t, leaf] += num[i]
            vden[t, leaf] += den[i]
        # children carry larger ids than parents: accumulate bottom-up
        for node in range(nodes - 1, 0, -1):
            pa = parent[node]
            cnt[pa] += cnt[node]
            vnum[t, pa] += vnum[t, node]
            vden[t, pa] += vden[t, node]
        for node in range(nodes):
            if cnt[node] > 0:
                vnum[t, node] /= cnt[node]
                vden[t, node] /= cnt[node]
            else:
                # empty honest leaf: borrow the nearest populated ancestor
                vnum[t, node] = vnum[t, parent[node]]
                vden[t, node] = vden[t, parent[node]]
                cnt[node] = -1.0
    return feat, split, left, right, vnum, vden


@njit(cache=True, nogil=True)
def _predict_forest(Xb, feat, split, left, right, vnum, vden):
    n = Xb.shape[0]
    num = np.zeros(n)
    den = np.zeros(n)
    for t in range(feat.shape[0]):
        for i in range(n):
            leaf = _route(Xb, i, feat[t], split[t], left[t], right[t])
            num[i] += vnum[t, leaf]
            den[i] += vden[t, leaf]
    return num, den


class HonestForest:
    """Average of honest trees: splits from one half of each subsample, leaf
    statistics from the other half."""

    def __init__(self, edges, arrays, params):
        self.edges = edges
        self.arrays = arrays
        self.params = params

    @property
    def num_trees(self) -> int:
        return self.arrays[0].shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        num, den = _predict_forest(_binned(X, self.edges), *self.arrays)
        return safe_ratio(num, den)


def fit_honest_forest(X, y, params: ForestParams = ForestParams(), seed=0,
                      sample_weight=None, ratio=None) -> HonestForest:
    """Grow an honest forest on ``(X, y)``.

    Parameters
    ----------
    X : array, shape (n, p)
    y : array, shape (n,)
        Target used to choose splits (weighted squared-error reduction).
    seed : int, sequence of int or SeedSequence
        Per-tree seeds are spawned from it, so results do not depend on the
        number of worker threads.
    sample_weight : array, optional
        Split-selection weights. When given without ``ratio`` the leaf value
        is the weighted mean of ``y``.
    ratio : (num, den), optional
        Leaf statistics; the forest predicts ``sum_trees mean(num) / sum_trees mean(den)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    n_sub = int(params.subsample * n)
    if n_sub < 2:
        raise DataError(f"{n} observations are too few for subsample={params.subsample}")
    if ratio is not None:
        num, den = (np.asarray(a, dtype=float) for a in ratio)
    elif sample_weight is not None:
        den = np.asarray(sample_weight, dtype=float)
        num = den * y
    else:
        num, den = y, np.ones(n)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = np.array([c.generate_state(1)[0] for c in ss.spawn(params.num_trees)], dtype=np.int64)
    edges = _bin_edges(X)
    arrays = _fit_forest(_binned(X, edges), y, w, num, den, seeds, n_sub,
                         params.min_leaf, params.resolve_mtry(p), MAX_BINS)
    return HonestForest(edges, arrays, params)


class KnnModel:
    """Ratio of neighbourhood means on standardised features."""

    def __init__(self, X, num, den, k):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.center = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale = np.where(scale > 0, scale, 1.0)
        self.k = min(k, X.shape[0])
        self.num = np.asarray(num, dtype=float)
        self.den = np.asarray(den, dtype=float)
        self.index = NearestNeighbors(n_neighbors=self.k).fit((X - self.center) / self.scale)

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        nbrs = self.index.kneighbors((X - self.center) / self.scale, return_distance=False)
        return safe_ratio(self.num[nbrs].mean(axis=1), self.den[nbrs].mean(axis=1))


def fit_knn(X, y, k: int = 10, sample_weight=None, ratio=None) -> KnnModel:
    if k < 1:
        raise ConfigError("k must be >= 1")
    y = np.asarray(y, dtype=float)
    if ratio is not None:
        num, den = ratio
    elif sample_weight is not None:
        den = np.asarray(sample_weight, dtype=float)
        num = den * y
    else:
        num, den = y, np.ones_like(y)
    return KnnModel(X, num, den, k)
