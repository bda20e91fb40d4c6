"""Regression random forests with out-of-bag prediction.

Trees are grown on bootstrap samples of size K by exhaustive
variance-reduction search over ``mtry`` randomly chosen features per
node, splitting at midpoints between adjacent observed values. A node
becomes a leaf when it holds ``minnode`` or fewer bootstrap draws, when
its responses are all equal, or when no candidate feature varies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    mtry: int = 1
    minnode: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.mtry < 1:
            raise ValueError("mtry must be at least 1")
        if self.minnode < 1:
            raise ValueError("minnode must be at least 1")

    def check(self, p: int) -> None:
        if self.mtry > p:
            raise ValueError(f"mtry={self.mtry} exceeds the number of features ({p})")


@njit(cache=True)
def _grow(x, y, rows, mtry, minnode, uniforms):
    """Grow one tree on the bootstrap multiset ``rows``.

    ``uniforms[i]`` supplies the feature-sampling noise for the i-th split
    attempt. Returns flat node arrays; leaves have ``feature == -1``.
    """
    n = rows.size
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)

    order = rows.copy()
    # stack of (node id, start, stop) into ``order``
    stack_node = np.empty(cap, np.int32)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    top = 1
    n_nodes = 1
    attempt = 0
    keys = np.empty(n)
    idx = np.empty(n, np.int64)
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        m = hi - lo
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(lo, hi):
            v = y[order[i]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = s / m
        if m <= minnode or ymin == ymax:
            continue
        # mtry features with the smallest noise values for this attempt
        feats = np.argsort(uniforms[attempt % uniforms.shape[0]])[:mtry]
        attempt += 1
        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        base = s * s / m
        for f in feats:
            for i in range(m):
                keys[i] = x[order[lo + i], f]
            srt = np.argsort(keys[:m], kind="mergesort")
            sl = 0.0
            for j in range(m - 1):
                r = order[lo + srt[j]]
                sl += y[r]
                a = keys[srt[j]]
                b = keys[srt[j + 1]]
                if a == b:
                    continue
                nl = j + 1
                nr = m - nl
                sr = s - sl
                gain = sl * sl / nl + sr * sr / nr - base
                if gain > best_gain * (1.0 + 1e-12) + 1e-300:
                    best_gain = gain
                    best_feat = f
                    best_thr = 0.5 * (a + b)
                    if best_thr >= b:
                        best_thr = a
        if best_feat < 0:
            continue
        # partition order[lo:hi] in place
        nl = 0
        for i in range(lo, hi):
            if x[order[i], best_feat] <= best_thr:
                idx[nl] = order[i]
                nl += 1
        k = nl
        for i in range(lo, hi):
            if x[order[i], best_feat] > best_thr:
                idx[k] = order[i]
                k += 1
        for i in range(m):
            order[lo + i] = idx[i]
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        top += 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        top += 1
        n_nodes += 2
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes])


@njit(cache=True)
def _predict(feature, threshold, left, right, value, x):
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        return _predict(self.feature, self.threshold, self.left, self.right, self.value, x)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


@dataclass(frozen=True)
class Forest:
    """An ensemble of trees with the bootstrap draw counts of each.

    ``inbag[t, k]`` is how many times row ``k`` was drawn for tree ``t``.
    """

    trees: tuple[Tree, ...]
    inbag: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def tree_predictions(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        return np.stack([t.predict(x) for t in self.trees])

    def predict(self, x) -> np.ndarray:
        return self.tree_predictions(x).mean(axis=0)

    def oob_mask(self) -> np.ndarray:
        return self.inbag == 0

    @staticmethod
    def concatenate(forests: Sequence["Forest"]) -> "Forest":
        return Forest(tuple(t for f in forests for t in f.trees),
                      np.vstack([f.inbag for f in forests]))


def fit_tree(z, r, rows, mtry: int, minnode: int, rng: np.random.Generator) -> Tree:
    """Grow a single tree on explicit bootstrap rows."""
    z = np.ascontiguousarray(z, dtype=float)
    r = np.ascontiguousarray(r, dtype=float)
    rows = np.asarray(rows, dtype=np.int64)
    uniforms = rng.random((max(rows.size, 1), z.shape[1]))
    return Tree(*_grow(z, r, rows, mtry, minnode, uniforms))


def _check_inputs(z, r):
    z = np.ascontiguousarray(z, dtype=float)
    r = np.ascontiguousarray(r, dtype=float)
    if z.ndim != 2:
        raise ValueError("z must be a K x p matrix")
    if z.shape[0] < 2:
        raise ValueError("a forest needs at least two rows")
    if r.shape != (z.shape[0],):
        raise ValueError("r must have one entry per row of z")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(r))):
        raise ValueError("missing or non-finite values are not supported")
    return z, r


def fit_forest(z, r, params: ForestParams) -> Forest:
    """Fit ``params.n_trees`` trees, each on a bootstrap sample of size K."""
    z, r = _check_inputs(z, r)
    k, p = z.shape
    params.check(p)
    rng = np.random.default_rng(np.random.SeedSequence(params.seed))
    trees = []
    inbag = np.zeros((params.n_trees, k), dtype=np.int32)
    for t in range(params.n_trees):
        rows = rng.integers(0, k, size=k)
        inbag[t] = np.bincount(rows, minlength=k)
        trees.append(fit_tree(z, r, rows, params.mtry, params.minnode, rng))
    return Forest(tuple(trees), inbag)


def oob_sums(forest: Forest, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row sum of OOB tree predictions, OOB tree counts, and all-tree predictions."""
    preds = forest.tree_predictions(z)
    mask = forest.oob_mask()
    # fixed-order reduction over trees
    sums = np.where(mask, preds, 0.0).sum(axis=0)
    counts = mask.sum(axis=0)
    return sums, counts, preds.mean(axis=0)


def oob_predict(forest: Forest, z) -> tuple[np.ndarray, np.ndarray]:
    """OOB predictions and the number of trees behind each.

    Rows that no tree left out get ``nan``; see :func:`oob_estimate` for
    the fallback applied during estimation.
    """
    sums, counts, _ = oob_sums(forest, z)
    with np.errstate(invalid="ignore", divide="ignore"):
        pred = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return pred, counts


@dataclass(frozen=True)
class OobEstimate:
    m_hat: np.ndarray
    sigma2_m: float
    n_oob_trees: np.ndarray
    r_tilde: np.ndarray

    @property
    def n_fallback(self) -> int:
        return int((self.n_oob_trees == 0).sum())


def oob_estimate(sums, counts, full, response_sums) -> OobEstimate:
    """Weighted OOB aggregation.

    ``sums`` and ``response_sums`` are per-row sums over OOB trees of the
    tree predictions and of the responses each tree was trained on.
    """
    counts = np.asarray(counts)
    ok = counts > 0
    safe = np.maximum(counts, 1)
    m_hat = np.where(ok, sums / safe, full)
    r_tilde = np.where(ok, response_sums / safe, np.nan)
    if not ok.all():
        logger.warning("%d row(s) have no out-of-bag trees; using full-ensemble "
                       "predictions there", int((~ok).sum()))
    if ok.any():
        sigma2 = float(np.mean((r_tilde[ok] - m_hat[ok]) ** 2))
    else:
        sigma2 = 0.0
    return OobEstimate(m_hat, sigma2, counts.astype(int), r_tilde)


def sample_seed(seed: int, index: int) -> int:
    """Derive the seed of sub-task ``index`` from a master seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def fit_multisample_forest(z, r_samples, params: ForestParams
                           ) -> tuple[Forest, OobEstimate]:
    """One ``params.n_trees``-tree forest per response sample, pooled.

    Each sub-forest q is trained on ``r_samples[q]`` with its own derived
    seed. The pooled OOB prediction weights sub-forest q's OOB mean for
    row k by its OOB tree count, which is the plain mean over every OOB
    tree in the pooled ensemble.
    """
    r_samples = np.atleast_2d(np.asarray(r_samples, dtype=float))
    if r_samples.shape[0] < 1:
        raise ValueError("need at least one response sample")
    z, _ = _check_inputs(z, r_samples[0])
    k = z.shape[0]
    if r_samples.shape[1] != k:
        raise ValueError("each response sample must have K entries")
    forests = []
    sums = np.zeros(k)
    resp = np.zeros(k)
    counts = np.zeros(k, dtype=np.int64)
    full = np.zeros(k)
    for q, rq in enumerate(r_samples):
        sub = ForestParams(params.n_trees, params.mtry, params.minnode,
                           sample_seed(params.seed, q))
        f = fit_forest(z, rq, sub)
        s, c, fp = oob_sums(f, z)
        sums += s
        counts += c
        resp += c * rq
        full += fp * f.n_trees
        forests.append(f)
    pooled = Forest.concatenate(forests)
    est = oob_estimate(sums, counts, full / pooled.n_trees, resp)
    return pooled, est


def default_grid(p: int) -> list[tuple[int, int]]:
    mtrys = sorted({math.ceil(p / 3), math.ceil(p / 2), p})
    return [(m, n) for m in mtrys for n in (5, 10, 25)]


def oob_rmse(forest: Forest, z, r) -> float:
    pred, counts = oob_predict(forest, z)
    ok = counts > 0
    return float(np.sqrt(np.mean((np.asarray(r)[ok] - pred[ok]) ** 2)))


def tune_forest(z, r, grid=None, n_trees: int = 500, seed: int = 0) -> ForestParams:
    """Grid point with the smallest OOB RMSE.

    Every grid point is fitted with the same seed. Ties go to the smaller
    ``mtry``, then the smaller ``minnode``.
    """
    z, r = _check_inputs(z, r)
    grid = default_grid(z.shape[1]) if grid is None else list(grid)
    if not grid:
        raise ValueError("tuning grid is empty")
    best = None
    for mtry, minnode in sorted(set((int(a), int(b)) for a, b in grid)):
        params = ForestParams(n_trees, mtry, minnode, seed)
        params.check(z.shape[1])
        score = oob_rmse(fit_forest(z, r, params), z, r)
        logger.debug("tune mtry=%d minnode=%d oob_rmse=%.6g", mtry, minnode, score)
        if best is None or score < best[0]:
            best = (score, params)
    return best[1]
