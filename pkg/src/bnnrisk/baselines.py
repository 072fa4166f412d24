"""Gradient-boosted regression trees for binary log-loss, exact greedy splits."""

from dataclasses import dataclass, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ndcore import ShapeError, sigmoid

__all__ = [
    "GbdtConfig",
    "Tree",
    "GbdtModel",
    "train_gbdt",
    "predict_gbdt",
    "GradientBoostedTrees",
]

_HESS_FLOOR = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be nonnegative")
        if self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("max_depth and min_samples_leaf must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GBDT options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Tree:
    """Flat binary tree. Leaves have ``feature == -1``; rows go left when
    ``x[feature] <= threshold``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self):
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def apply(self, x):
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return self.value[node]
            rows = np.flatnonzero(internal)
            go_left = x[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
        )


@dataclass(frozen=True)
class GbdtModel:
    trees: tuple
    learning_rate: float
    initial_log_odds: float
    n_features: int


def _best_split(x, grad, rows, presorted, min_leaf):
    """Highest least-squares gain over all features and thresholds, or None.

    ``rows`` is a boolean membership mask; ``presorted[j]`` orders all records
    by feature ``j`` so each node only filters instead of re-sorting.
    """
    n = int(rows.sum())
    g_node = grad[rows]
    total = g_node.sum()
    base = total * total / n
    best = None
    best_gain = 1e-12
    lo, hi = min_leaf - 1, n - min_leaf - 1  # allowed positions of the last left row
    if lo > hi:
        return None
    pos_all = np.arange(lo, hi + 1)
    for j, order in enumerate(presorted):
        order = order[rows[order]]
        xs = x[order, j]
        csum = np.cumsum(grad[order])
        pos = pos_all[xs[pos_all] < xs[pos_all + 1]]
        if pos.size == 0:
            continue
        n_left = pos + 1.0
        s_left = csum[pos]
        s_right = total - s_left
        gain = s_left**2 / n_left + s_right**2 / (n - n_left) - base
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            best_gain = float(gain[k])
            best = (j, float(xs[pos[k]]))
    return best


def _grow_tree(x, grad, hess, presorted, max_depth, min_leaf):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    def build(rows, depth):
        node = new_node()
        split = None
        if depth < max_depth and rows.sum() >= 2 * min_leaf:
            split = _best_split(x, grad, rows, presorted, min_leaf)
        if split is None:
            value[node] = grad[rows].sum() / max(hess[rows].sum(), _HESS_FLOOR)
            return node
        j, t = split
        goes_left = x[:, j] <= t
        feature[node], threshold[node] = j, t
        left[node] = build(rows & goes_left, depth + 1)
        right[node] = build(rows & ~goes_left, depth + 1)
        return node

    build(np.ones(len(grad), dtype=bool), 0)
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


def _raw_score(model, x):
    f = np.full(len(x), model.initial_log_odds)
    for tree in model.trees:
        f += model.learning_rate * tree.apply(x)
    return f


def train_gbdt(x, y, config=None):
    """Boost regression trees on the BCE gradient ``y - p`` with Newton leaves."""
    config = config or GbdtConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError("x must be 2-D with one row per label")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    rate = y.mean()
    if rate in (0.0, 1.0):
        raise ValueError("training set holds a single class; boosting needs both")
    f0 = float(np.log(rate / (1.0 - rate)))
    f = np.full(len(y), f0)
    presorted = [np.argsort(x[:, j], kind="stable") for j in range(x.shape[1])]
    trees = []
    for _ in range(config.n_trees):
        p = sigmoid(f)
        tree = _grow_tree(x, y - p, p * (1.0 - p), presorted, config.max_depth, config.min_samples_leaf)
        f += config.learning_rate * tree.apply(x)
        trees.append(tree)
    return GbdtModel(tuple(trees), config.learning_rate, f0, x.shape[1])


def predict_gbdt(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got shape {x.shape}")
    return sigmoid(_raw_score(model, x))


class GradientBoostedTrees(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_gbdt` / :func:`predict_gbdt`."""

    def __init__(self, n_trees=100, max_depth=3, learning_rate=0.1, min_samples_leaf=20, random_state=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        config = GbdtConfig(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            min_samples_leaf=self.min_samples_leaf,
            seed=self.random_state,
        )
        self.model_ = train_gbdt(X, y, config)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = predict_gbdt(self.model_, check_array(X, dtype=np.float64))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
