"""Gradient-boosted regression trees on the logistic loss, exact greedy splits.

Second-order boosting: each round fits one tree to the gradients g = p - y and
hessians h = p (1 - p) of the current margin. Split gain is

    0.5 * (GL^2 / (HL + lam) + GR^2 / (HR + lam) - G^2 / (H + lam))

and leaf weights are -G / (H + lam), shrunk by the learning rate. Candidate
thresholds are midpoints between consecutive distinct feature values inside a
node. Defaults mirror the canonical library: lam=1, no split penalty, no
subsampling, min_child_weight=1 on the hessian sum, base score 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

MIN_GAIN = 1e-6


@dataclass
class GBTParams:
    n_rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0


@dataclass
class Tree:
    feature: np.ndarray  # -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf weight (already shrunk)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)


@numba.njit(cache=True)
def _grow_tree(order, xs, g, h, max_depth, lam, gamma, mcw, eta, out_margin, buf_order, buf_xs):
    """Level-wise exact greedy growth. Returns node arrays; adds leaf values to out_margin.

    Rows are kept per feature in a node-partitioned layout: every splittable
    node owns one contiguous, value-sorted segment (the same extent in every
    feature). ``buf_order``/``buf_xs`` are (2, F, n) ping-pong buffers.
    """
    n_feat, n = order.shape
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes)
    node_g = np.zeros(max_nodes)
    node_h = np.zeros(max_nodes)
    seg_lo = np.zeros(max_nodes, np.int64)
    seg_hi = np.zeros(max_nodes, np.int64)
    best_gain = np.zeros(max_nodes)
    best_feat = np.full(max_nodes, -1, np.int64)
    best_thr = np.zeros(max_nodes)
    cursor = np.zeros(max_nodes, np.int64)

    node_of = np.zeros(n, np.int64)
    for i in range(n):
        node_g[0] += g[i]
        node_h[0] += h[i]
    n_nodes = 1
    seg_hi[0] = n
    frontier = np.zeros(1, np.int64)
    cur_order = order
    cur_xs = xs
    side = 0

    for depth in range(max_depth + 1):
        if frontier.size == 0:
            break
        for k in frontier:
            best_gain[k] = MIN_GAIN
            best_feat[k] = -1
        if depth < max_depth:
            for k in frontier:
                # a split needs both children to reach min_child_weight
                if node_h[k] < 2.0 * mcw:
                    continue
                G = node_g[k]
                H = node_h[k]
                parent = G * G / (H + lam)
                lo = seg_lo[k]
                hi = seg_hi[k]
                for f in range(n_feat):
                    GL = 0.0
                    HL = 0.0
                    prev = cur_xs[f, lo]
                    for r in range(lo, hi):
                        v = cur_xs[f, r]
                        if r > lo and v != prev:
                            HR = H - HL
                            if HL >= mcw and HR >= mcw:
                                GR = G - GL
                                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
                                if gain > best_gain[k]:
                                    best_gain[k] = gain
                                    best_feat[k] = f
                                    best_thr[k] = 0.5 * (prev + v)
                        i = cur_order[f, r]
                        GL += g[i]
                        HL += h[i]
                        prev = v

        # finalize this level
        count = 0
        for k in frontier:
            if best_feat[k] >= 0:
                count += 2
            else:
                value[k] = -eta * node_g[k] / (node_h[k] + lam)
        if count == 0:
            break
        nxt = np.zeros(count, np.int64)
        c = 0
        pos = 0
        for k in frontier:
            if best_feat[k] < 0:
                continue
            f = best_feat[k]
            thr = best_thr[k]
            lk = n_nodes
            rk = n_nodes + 1
            feature[k] = f
            threshold[k] = thr
            left[k] = lk
            right[k] = rk
            nxt[c] = lk
            nxt[c + 1] = rk
            c += 2
            n_nodes += 2
            n_left = 0
            for r in range(seg_lo[k], seg_hi[k]):
                i = cur_order[f, r]
                if cur_xs[f, r] < thr:
                    node_of[i] = lk
                    n_left += 1
                else:
                    node_of[i] = rk
            seg_lo[lk] = pos
            seg_hi[lk] = pos + n_left
            seg_lo[rk] = pos + n_left
            seg_hi[rk] = pos + (seg_hi[k] - seg_lo[k])
            pos = seg_hi[rk]
        for k in nxt:
            node_g[k] = 0.0
            node_h[k] = 0.0
        for i in range(n):
            k = node_of[i]
            if feature[k] < 0 and k >= nxt[0]:
                node_g[k] += g[i]
                node_h[k] += h[i]
        if depth + 1 < max_depth:
            # stable partition of every split segment into its two children
            side = 1 - side
            dst_order = buf_order[side]
            dst_xs = buf_xs[side]
            for f in range(n_feat):
                for k in nxt:
                    cursor[k] = seg_lo[k]
                for k in frontier:
                    if feature[k] < 0:
                        continue
                    for r in range(seg_lo[k], seg_hi[k]):
                        i = cur_order[f, r]
                        d = node_of[i]
                        q = cursor[d]
                        dst_order[f, q] = i
                        dst_xs[f, q] = cur_xs[f, r]
                        cursor[d] = q + 1
            cur_order = dst_order
            cur_xs = dst_xs
        frontier = nxt

    for i in range(n):
        out_margin[i] += value[node_of[i]]
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            if X[i, feature[k]] < threshold[k]:
                k = left[k]
            else:
                k = right[k]
        out[i] += value[k]


def _sigmoid(m: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * m))


@dataclass
class GBTClassifier:
    params: GBTParams = field(default_factory=GBTParams)
    trees: list[Tree] = field(default_factory=list)

    def fit(self, X: np.ndarray, y: np.ndarray, presorted: tuple[np.ndarray, np.ndarray] | None = None) -> "GBTClassifier":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if presorted is None:
            presorted = presort(X)
        order, xs = presorted
        p = self.params
        margin = np.zeros(X.shape[0])
        buf_order = np.empty((2,) + order.shape, dtype=order.dtype)
        buf_xs = np.empty((2,) + xs.shape, dtype=xs.dtype)
        self.trees = []
        for _ in range(p.n_rounds):
            prob = _sigmoid(margin)
            g = prob - y
            h = prob * (1.0 - prob)
            arrays = _grow_tree(order, xs, g, h, p.max_depth, p.reg_lambda, p.gamma, p.min_child_weight,
                                p.learning_rate, margin, buf_order, buf_xs)
            self.trees.append(Tree(*arrays))
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.zeros(X.shape[0])
        for t in self.trees:
            _predict_tree(X, t.feature, t.threshold, t.left, t.right, t.value, out)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.decision_function(X) > 0.0


def presort(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature ascending sample order (stable) and the sorted values, both (F, n)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    xs = np.ascontiguousarray(np.take_along_axis(X, order.T, axis=0).T)
    return order, xs


# -- slow reference used to cross-check the compiled builder ---------------------------------


def reference_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, params: GBTParams) -> Tree:
    """Same algorithm, brute force: every node re-sorts its own samples."""
    lam, mcw, eta = params.reg_lambda, params.min_child_weight, params.learning_rate
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    frontier = [(root, np.arange(X.shape[0]))]
    for depth in range(params.max_depth + 1):
        nxt = []
        for k, idx in frontier:
            G, H = g[idx].sum(), h[idx].sum()
            best = (MIN_GAIN, -1, 0.0)
            if depth < params.max_depth and H >= 2 * mcw:
                for f in range(X.shape[1]):
                    vals = np.unique(X[idx, f])
                    for a, b in zip(vals[:-1], vals[1:]):
                        mask = X[idx, f] <= a
                        GL, HL = g[idx][mask].sum(), h[idx][mask].sum()
                        GR, HR = G - GL, H - HL
                        if HL < mcw or HR < mcw:
                            continue
                        gain = 0.5 * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - G**2 / (H + lam)) - params.gamma
                        if gain > best[0]:
                            best = (gain, f, 0.5 * (a + b))
            if best[1] < 0:
                value[k] = -eta * G / (H + lam)
                continue
            feature[k], threshold[k] = best[1], best[2]
            lo, hi = new_node(), new_node()
            left[k], right[k] = lo, hi
            go_left = X[idx, best[1]] < best[2]
            nxt += [(lo, idx[go_left]), (hi, idx[~go_left])]
        frontier = nxt
        if not frontier:
            break
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value))
