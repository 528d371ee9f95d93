"""Binary probes, F1 scoring and latent truncation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gbt import GBTClassifier, GBTParams


class ProbeError(ValueError):
    pass


@dataclass
class ProbeDataset:
    features: np.ndarray  # (n, f)
    labels: np.ndarray  # (n,) bool
    train: np.ndarray  # row indices
    test: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if len(np.intersect1d(self.train, self.test)):
            raise ProbeError("train and test rows overlap")
        if len(self.test) == 0:
            raise ProbeError("empty test split")

    @property
    def x_train(self) -> np.ndarray:
        return self.features[self.train]

    @property
    def x_test(self) -> np.ndarray:
        return self.features[self.test]

    @property
    def y_train(self) -> np.ndarray:
        return self.labels[self.train]

    @property
    def y_test(self) -> np.ndarray:
        return self.labels[self.test]


def f1_score(predictions, labels) -> float:
    pred = np.asarray(predictions, dtype=bool)
    true = np.asarray(labels, dtype=bool)
    if pred.shape != true.shape:
        raise ProbeError(f"length mismatch {pred.shape} vs {true.shape}")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _require_both_classes(y: np.ndarray, what: str) -> None:
    if y.all() or not y.any():
        raise ProbeError(f"{what}: training labels contain a single class")


# -- truncation ---------------------------------------------------------------------


def class_mean_gap(latents: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    _require_both_classes(labels, "select_top_latents")
    z = np.asarray(latents, dtype=np.float64)
    return np.abs(z[labels].mean(axis=0) - z[~labels].mean(axis=0))


def select_top_latents(latents_train: np.ndarray, labels_train, L: int) -> np.ndarray:
    """Indices of the L latents with the largest |mean(pos) - mean(neg)|.

    Only training rows may be passed in. Ordered by descending score with
    ties going to the lower index.
    """
    score = class_mean_gap(latents_train, labels_train)
    if not 1 <= L <= score.size:
        raise ProbeError(f"truncation length {L} outside [1, {score.size}]")
    order = np.lexsort((np.arange(score.size), -score))
    return order[:L]


# -- kNN ---------------------------------------------------------------------------------

KNN_K = 16


def knn_neighbors(x_train: np.ndarray, x_test: np.ndarray, k: int = KNN_K, block: int = 512) -> np.ndarray:
    """Indices of the k nearest training rows for every test row (Euclidean, stable ties)."""
    if x_train.shape[0] < k:
        raise ProbeError(f"kNN needs at least {k} training points")
    a = np.asarray(x_train, dtype=np.float64)
    sq = np.sum(a * a, axis=1)
    out = np.empty((x_test.shape[0], k), dtype=np.int64)
    for s in range(0, x_test.shape[0], block):
        b = np.asarray(x_test[s : s + block], dtype=np.float64)
        d = sq[None, :] - 2.0 * (b @ a.T)
        out[s : s + block] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def knn_predict(neighbors: np.ndarray, y_train: np.ndarray) -> np.ndarray:
    votes = np.asarray(y_train, dtype=bool)[neighbors].sum(axis=1)
    return votes >= neighbors.shape[1] // 2


def knn_probe(data: ProbeDataset, neighbors: np.ndarray | None = None) -> float:
    """Positive iff at least 8 of the 16 nearest training neighbours are positive."""
    if neighbors is None:
        neighbors = knn_neighbors(data.x_train, data.x_test)
    return f1_score(knn_predict(neighbors, data.y_train), data.y_test)


# -- logistic regression --------------------------------------------------------------------


@dataclass
class LogRegParams:
    learning_rate: float = 1e-3
    l2: float = 1e-4
    epochs: int = 200
    batch_size: int = 64


def logistic_loss(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean binary cross-entropy plus (l2 / 2) ||w||^2."""
    m = X @ w + b
    # log(1 + e^m) - y m, computed stably
    ce = np.logaddexp(0.0, m) - y * m
    return float(ce.mean() + 0.5 * l2 * np.dot(w, w))


def logistic_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[np.ndarray, float]:
    m = X @ w + b
    r = 0.5 * (1.0 + np.tanh(0.5 * m)) - y
    return X.T @ r / X.shape[0] + l2 * w, float(r.mean())


def fit_logreg(X: np.ndarray, y: np.ndarray, params: LogRegParams, seed: int) -> tuple[np.ndarray, float]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, f = X.shape
    w = np.zeros(f)
    b = 0.0
    rng = np.random.default_rng(seed)
    lr = params.learning_rate
    for _ in range(params.epochs):
        order = rng.permutation(n)
        for s in range(0, n, params.batch_size):
            idx = order[s : s + params.batch_size]
            gw, gb = logistic_grad(w, b, X[idx], y[idx], params.l2)
            w -= lr * gw
            b -= lr * gb
    return w, b


def logreg_probe(data: ProbeDataset, seed: int = 0, params: LogRegParams | None = None) -> float:
    params = params or LogRegParams()
    _require_both_classes(data.y_train, "logreg_probe")
    w, b = fit_logreg(data.x_train, data.y_train, params, seed)
    return f1_score(data.x_test.astype(np.float64) @ w + b > 0.0, data.y_test)


# -- boosted trees ---------------------------------------------------------------------------


def gbt_probe(data: ProbeDataset, params: GBTParams | None = None, presorted=None) -> float:
    clf = GBTClassifier(params or GBTParams())
    clf.fit(data.x_train, data.y_train, presorted=presorted)
    return f1_score(clf.predict(data.x_test), data.y_test)
