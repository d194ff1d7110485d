"""Hoeffding tree base learner and the warning/drift model-replacement protocol.

The tree lives in flat arrays so that prediction and learning run as compiled
loops.  Numeric attributes are summarised per leaf by fixed-width histograms
whose bounds follow the running per-feature min/max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .detector import Signal


@dataclass(frozen=True)
class TreeParams:
    grace_period: int = 200
    split_confidence: float = 1e-7
    tie_threshold: float = 0.05
    n_bins: int = 10
    max_depth: int = 30
    leaf_prediction: str = "nba"

    def __post_init__(self) -> None:
        if self.leaf_prediction not in ("majority", "nba"):
            raise ValueError("leaf_prediction must be 'majority' or 'nba'")


@numba.njit(cache=True)
def _route(x, feature, threshold, left, right):
    node = 0
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@numba.njit(cache=True)
def _bin(v, lo, hi, n_bins):
    span = hi - lo
    if not span > 0:
        return 0
    b = int((v - lo) / span * n_bins)
    if b >= n_bins:
        return n_bins - 1
    if b < 0:
        return 0
    return b


@numba.njit(cache=True)
def _majority(cnt):
    best = 0
    for c in range(1, cnt.shape[0]):
        if cnt[c] > cnt[best]:
            best = c
    return best


@numba.njit(cache=True)
def _naive_bayes(x, cnt, hist_leaf, lo, hi, n_bins):
    """Class with the largest Laplace-smoothed naive Bayes score over the binned features.

    Priors and likelihoods both come from the leaf's own histograms; class
    counts inherited at a split carry no feature statistics.  A leaf without
    histogram data answers with its majority class.
    """
    n_classes = cnt.shape[0]
    seen = np.zeros(n_classes)
    for c in range(n_classes):
        for b in range(n_bins):
            seen[c] += hist_leaf[0, b, c]
    if seen.sum() <= 0:
        return _majority(cnt)
    best = 0
    best_score = -np.inf
    for c in range(n_classes):
        if seen[c] <= 0:
            continue
        score = math.log(seen[c])
        for f in range(x.shape[0]):
            b = _bin(x[f], lo[f], hi[f], n_bins)
            score += math.log((hist_leaf[f, b, c] + 1.0) / (seen[c] + n_bins))
        if score > best_score:
            best_score = score
            best = c
    return best


@numba.njit(cache=True)
def _predict_batch(X, feature, threshold, left, right, counts, hist, mc_hits, nb_hits, lo, hi, n_bins, out):
    for i in range(X.shape[0]):
        leaf = _route(X[i], feature, threshold, left, right)
        if nb_hits[leaf] > mc_hits[leaf]:
            out[i] = _naive_bayes(X[i], counts[leaf], hist[leaf], lo, hi, n_bins)
        else:
            out[i] = _majority(counts[leaf])


@numba.njit(cache=True)
def _entropy(cnt, total):
    if total <= 0.0:
        return 0.0
    h = 0.0
    for c in range(cnt.shape[0]):
        if cnt[c] > 0:
            p = cnt[c] / total
            h -= p * math.log2(p)
    return h


@numba.njit(cache=True)
def _best_splits(hist, counts_leaf, n_bins):
    """Best information gain per feature over the bin boundaries, and its boundary."""
    n_features = hist.shape[0]
    n_classes = hist.shape[2]
    total = counts_leaf.sum()
    h_parent = _entropy(counts_leaf, total)
    gains = np.full(n_features, -1.0)
    cuts = np.zeros(n_features, dtype=np.int64)
    left = np.zeros(n_classes)
    right = np.zeros(n_classes)
    for f in range(n_features):
        n_f = 0.0
        for b in range(n_bins):
            for c in range(n_classes):
                n_f += hist[f, b, c]
        if n_f <= 0:
            continue
        left[:] = 0.0
        for b in range(n_bins - 1):
            nl = 0.0
            for c in range(n_classes):
                left[c] += hist[f, b, c]
                nl += left[c]
            nr = n_f - nl
            if nl <= 0 or nr <= 0:
                continue
            for c in range(n_classes):
                tot_c = 0.0
                for bb in range(n_bins):
                    tot_c += hist[f, bb, c]
                right[c] = tot_c - left[c]
            g = h_parent - (nl / n_f) * _entropy(left, nl) - (nr / n_f) * _entropy(right, nr)
            if g > gains[f]:
                gains[f] = g
                cuts[f] = b
    return gains, cuts


@numba.njit(cache=True)
def _learn_batch(X, y, feature, threshold, left, right, depth, counts, hist, last_check, mc_hits, nb_hits,
                 lo, hi, n_nodes, grace, delta, tau, n_bins, max_depth, log2_classes, track_nb):
    n_features = X.shape[1]
    n_classes = counts.shape[1]
    for i in range(X.shape[0]):
        yi = y[i]
        if yi < 0:
            continue
        x = X[i]
        for f in range(n_features):
            if x[f] < lo[f]:
                lo[f] = x[f]
            if x[f] > hi[f]:
                hi[f] = x[f]
        leaf = _route(x, feature, threshold, left, right)
        if track_nb and counts[leaf].sum() > 0:
            if _majority(counts[leaf]) == yi:
                mc_hits[leaf] += 1.0
            if _naive_bayes(x, counts[leaf], hist[leaf], lo, hi, n_bins) == yi:
                nb_hits[leaf] += 1.0
        counts[leaf, yi] += 1.0
        for f in range(n_features):
            hist[leaf, f, _bin(x[f], lo[f], hi[f], n_bins), yi] += 1
        n_leaf = counts[leaf].sum()
        if n_leaf - last_check[leaf] < grace or depth[leaf] >= max_depth:
            continue
        last_check[leaf] = n_leaf
        # a pure leaf has nothing to gain from splitting
        n_nonzero = 0
        for c in range(n_classes):
            if counts[leaf, c] > 0:
                n_nonzero += 1
        if n_nonzero < 2:
            continue
        gains, cuts = _best_splits(hist[leaf], counts[leaf], n_bins)
        best_f = 0
        for f in range(1, n_features):
            if gains[f] > gains[best_f]:
                best_f = f
        second = 0.0
        for f in range(n_features):
            if f != best_f and gains[f] > second:
                second = gains[f]
        g_best = gains[best_f]
        if g_best <= 0:
            continue
        eps = math.sqrt(log2_classes * log2_classes * math.log(1.0 / delta) / (2.0 * n_leaf))
        if g_best - second > eps or eps < tau:
            b = cuts[best_f]
            span = hi[best_f] - lo[best_f]
            thr = lo[best_f] + (b + 1) * span / n_bins
            lc = n_nodes
            rc = n_nodes + 1
            n_nodes += 2
            feature[leaf] = best_f
            threshold[leaf] = thr
            left[leaf] = lc
            right[leaf] = rc
            for child in (lc, rc):
                feature[child] = -1
                left[child] = -1
                right[child] = -1
                depth[child] = depth[leaf] + 1
                counts[child, :] = 0.0
                hist[child] = 0
                mc_hits[child] = 0.0
                nb_hits[child] = 0.0
            for bb in range(n_bins):
                for c in range(n_classes):
                    if bb <= b:
                        counts[lc, c] += hist[leaf, best_f, bb, c]
                    else:
                        counts[rc, c] += hist[leaf, best_f, bb, c]
            # counts inherited from ancestors have no histogram; share them like the observed ones
            for c in range(n_classes):
                seen = counts[lc, c] + counts[rc, c]
                inherited = counts[leaf, c] - seen
                if inherited > 0:
                    frac = counts[lc, c] / seen if seen > 0 else 0.5
                    counts[lc, c] += inherited * frac
                    counts[rc, c] += inherited * (1.0 - frac)
            last_check[lc] = counts[lc].sum()
            last_check[rc] = counts[rc].sum()
    return n_nodes


class HoeffdingTree:
    """Incremental decision tree using the Hoeffding bound to decide splits."""

    def __init__(self, n_features: int, n_classes: int, params: TreeParams | None = None, capacity: int = 64):
        if n_classes < 2:
            raise ValueError("at least two classes are required")
        self.params = params or TreeParams()
        self.n_features = n_features
        self.n_classes = n_classes
        self.n_nodes = 1
        self.n_learned = 0
        self.lo = np.full(n_features, np.inf)
        self.hi = np.full(n_features, -np.inf)
        self._alloc(capacity)

    def _alloc(self, cap: int) -> None:
        F, C, B = self.n_features, self.n_classes, self.params.n_bins
        self.feature = np.full(cap, -1, dtype=np.int64)
        self.threshold = np.zeros(cap)
        self.left = np.full(cap, -1, dtype=np.int64)
        self.right = np.full(cap, -1, dtype=np.int64)
        self.depth = np.zeros(cap, dtype=np.int64)
        self.counts = np.zeros((cap, C))
        self.hist = np.zeros((cap, F, B, C), dtype=np.int32)
        self.last_check = np.zeros(cap)
        self.mc_hits = np.zeros(cap)
        self.nb_hits = np.zeros(cap)

    def _arrays(self) -> tuple:
        return (self.feature, self.threshold, self.left, self.right, self.depth, self.counts, self.hist,
                self.last_check, self.mc_hits, self.nb_hits)

    def _ensure(self, extra: int) -> None:
        need = self.n_nodes + extra
        cap = self.feature.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        old = self._arrays()
        self._alloc(new_cap)
        n = self.n_nodes
        for dst, src in zip(self._arrays(), old):
            dst[:n] = src[:n]

    @property
    def n_leaves(self) -> int:
        return int((self.feature[: self.n_nodes] < 0).sum())

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Class predicted at the leaf reached by each row; an untrained tree answers 0.

        A leaf answers with its majority class, or in ``nba`` mode with naive
        Bayes over its histograms whenever that has been the more accurate of
        the two on the leaf's own training instances.
        """
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        out = np.zeros(X.shape[0], dtype=np.int64)
        _predict_batch(X, self.feature, self.threshold, self.left, self.right, self.counts, self.hist,
                       self.mc_hits, self.nb_hits, self.lo, self.hi, self.params.n_bins, out)
        return out

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        leaf = _route(x, self.feature, self.threshold, self.left, self.right)
        cnt = self.counts[leaf]
        total = cnt.sum()
        if total <= 0:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return cnt / total

    def learn(self, X: np.ndarray, y: np.ndarray) -> None:
        """Update with labelled rows; rows with label -1 are skipped."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        y = np.ascontiguousarray(y, dtype=np.int64).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y hold different numbers of rows")
        if np.any(y >= self.n_classes):
            raise ValueError("label outside the class range")
        self._ensure(2 * X.shape[0] + 2)
        p = self.params
        self.n_nodes = _learn_batch(
            X, y, self.feature, self.threshold, self.left, self.right, self.depth,
            self.counts, self.hist, self.last_check, self.mc_hits, self.nb_hits, self.lo, self.hi, self.n_nodes,
            p.grace_period, p.split_confidence, p.tie_threshold, p.n_bins, p.max_depth,
            math.log2(self.n_classes), p.leaf_prediction == "nba",
        )
        self.n_learned += int((y >= 0).sum())

    def structure(self) -> tuple:
        n = self.n_nodes
        return (self.feature[:n].tolist(), self.threshold[:n].tolist(), self.left[:n].tolist(), self.right[:n].tolist())


class AdaptiveLearner:
    """Primary tree plus a shadow tree driven by detector signals.

    Warning starts a shadow tree that learns everything from then on; Drift
    installs the shadow (or a fresh tree when no Warning came first); a shadow
    that sees no Drift for ``stable_timeout`` instances is discarded.
    """

    def __init__(self, n_features: int, n_classes: int, params: TreeParams | None = None,
                 stable_timeout: int = 1000):
        self.n_features = n_features
        self.n_classes = n_classes
        self.params = params or TreeParams()
        self.stable_timeout = stable_timeout
        self.tree = HoeffdingTree(n_features, n_classes, self.params)
        self.shadow: HoeffdingTree | None = None
        self._since_warning = 0
        self.n_predicted = 0
        self.n_learned = 0
        self.replacements = 0

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = self.tree.predict(X)
        self.n_predicted += out.shape[0]
        return out

    def drift_protocol(self, signal: Signal) -> str:
        """Apply a detector signal; returns the action taken."""
        if signal == Signal.DRIFT:
            self.tree = self.shadow if self.shadow is not None else HoeffdingTree(
                self.n_features, self.n_classes, self.params)
            self.shadow = None
            self.replacements += 1
            return "replace"
        if signal == Signal.WARNING:
            self._since_warning = 0
            if self.shadow is None:
                self.shadow = HoeffdingTree(self.n_features, self.n_classes, self.params)
                return "start_shadow"
            return "continue_shadow"
        if self.shadow is not None and self._since_warning >= self.stable_timeout:
            self.shadow = None
            return "discard_shadow"
        return "none"

    def learn(self, X: np.ndarray, y: np.ndarray) -> None:
        n = np.atleast_2d(X).shape[0]
        if self.n_learned + n > self.n_predicted:
            raise RuntimeError("instances must be predicted before they are learned")
        self.n_learned += n
        self.tree.learn(X, y)
        if self.shadow is not None:
            self.shadow.learn(X, y)
            self._since_warning += n
