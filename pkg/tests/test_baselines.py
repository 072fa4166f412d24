import math

import numpy as np
import pytest
from sklearn.base import clone

from bnnrisk.baselines import GbdtConfig, GbdtModel, GradientBoostedTrees, Tree, predict_gbdt, train_gbdt
from bnnrisk.dataio import SyntheticSpec, generate_synthetic
from bnnrisk.metrics import bce
from bnnrisk.ndcore import ShapeError


def _stump(threshold, left, right):
    return Tree(
        feature=np.array([0, -1, -1]),
        threshold=np.array([threshold, 0.0, 0.0]),
        left=np.array([1, -1, -1]),
        right=np.array([2, -1, -1]),
        value=np.array([0.0, left, right]),
    )


def test_hand_built_stump():
    model = GbdtModel((_stump(0.5, -2.0, 3.0),), learning_rate=0.5, initial_log_odds=0.2, n_features=1)
    p = predict_gbdt(model, [[0.0], [0.5], [0.7]])
    s = lambda z: 1 / (1 + math.exp(-z))
    np.testing.assert_allclose(p, [s(0.2 - 1.0), s(0.2 - 1.0), s(0.2 + 1.5)], rtol=1e-15)
    assert model.trees[0].depth == 1


def test_stump_separates_threshold_data():
    x = np.arange(40, dtype=float)[:, None]
    y = (x[:, 0] > 17).astype(float)
    model = train_gbdt(x, y, GbdtConfig(n_trees=1, max_depth=1, learning_rate=1.0, min_samples_leaf=1))
    tree = model.trees[0]
    assert tree.feature[0] == 0 and tree.threshold[0] == 17.0
    assert np.mean((predict_gbdt(model, x) > 0.5) == y) == 1.0


def test_zero_trees_give_base_rate():
    y = np.array([1, 0, 0, 0, 1, 0, 0, 0, 0, 0], dtype=float)
    model = train_gbdt(np.random.default_rng(0).normal(size=(10, 2)), y, GbdtConfig(n_trees=0))
    np.testing.assert_allclose(predict_gbdt(model, np.zeros((3, 2))), 0.2, rtol=1e-14)


@pytest.fixture(scope="module")
def small_synthetic():
    train, test, _ = generate_synthetic(SyntheticSpec(n_features=6, n_train=3000, n_test=1000, n_ood=0, seed=2))
    return train, test


def test_training_loss_nonincreasing(small_synthetic):
    train, _ = small_synthetic
    cfg = GbdtConfig(n_trees=30, max_depth=3)
    model = train_gbdt(train.X, train.y, cfg)
    losses = []
    for k in range(cfg.n_trees + 1):
        partial = GbdtModel(model.trees[:k], model.learning_rate, model.initial_log_odds, model.n_features)
        losses.append(bce(predict_gbdt(partial, train.X), train.y).mean())
    assert np.all(np.diff(losses) <= 1e-12)
    assert losses[-1] < 0.8 * losses[0]


def test_depth_and_leaf_size_respected(small_synthetic):
    train, _ = small_synthetic
    model = train_gbdt(train.X, train.y, GbdtConfig(n_trees=5, max_depth=2, min_samples_leaf=300))
    for tree in model.trees:
        assert tree.depth <= 2
        counts = np.bincount(_leaf_index(tree, train.X), minlength=len(tree.feature))
        leaves = tree.feature < 0
        assert counts[leaves & (counts > 0)].min() >= 300


def _leaf_index(tree, x):
    node = np.zeros(len(x), dtype=np.int64)
    for _ in range(tree.depth):
        f = tree.feature[node]
        inner = f >= 0
        go_left = x[np.arange(len(x)), np.maximum(f, 0)] <= tree.threshold[node]
        node = np.where(inner, np.where(go_left, tree.left[node], tree.right[node]), node)
    return node


def test_invariant_to_increasing_feature_transforms(small_synthetic):
    train, test = small_synthetic
    cfg = GbdtConfig(n_trees=10, max_depth=3)
    base = predict_gbdt(train_gbdt(train.X, train.y, cfg), test.X)

    def warp(x):
        return np.exp(x / 2.0) * 3.0 + 1.0

    warped = predict_gbdt(train_gbdt(warp(train.X), train.y, cfg), warp(test.X))
    np.testing.assert_allclose(warped, base, rtol=1e-12)


def test_deterministic(small_synthetic):
    train, test = small_synthetic
    a = predict_gbdt(train_gbdt(train.X, train.y, GbdtConfig(n_trees=5)), test.X)
    b = predict_gbdt(train_gbdt(train.X, train.y, GbdtConfig(n_trees=5)), test.X)
    np.testing.assert_array_equal(a, b)


def test_tree_serialization_round_trip(small_synthetic):
    train, test = small_synthetic
    model = train_gbdt(train.X, train.y, GbdtConfig(n_trees=3))
    trees = tuple(Tree.from_dict(t.to_dict()) for t in model.trees)
    copy = GbdtModel(trees, model.learning_rate, model.initial_log_odds, model.n_features)
    np.testing.assert_array_equal(predict_gbdt(copy, test.X), predict_gbdt(model, test.X))


def test_input_errors():
    with pytest.raises(ValueError, match="single class"):
        train_gbdt(np.zeros((4, 1)), np.ones(4))
    with pytest.raises(ShapeError):
        train_gbdt(np.zeros((4, 1)), np.ones(3))
    model = train_gbdt(np.arange(4.0)[:, None], [0, 1, 0, 1], GbdtConfig(n_trees=1, min_samples_leaf=1))
    with pytest.raises(ShapeError):
        predict_gbdt(model, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        GbdtConfig(max_depth=0)
    with pytest.raises(ValueError, match="unknown"):
        GbdtConfig.from_dict({"trees": 3})


def test_estimator_api(small_synthetic):
    train, test = small_synthetic
    est = GradientBoostedTrees(n_trees=40, max_depth=2)
    assert clone(est).get_params() == est.get_params()
    est.fit(train.X, train.y)
    proba = est.predict_proba(test.X)
    assert proba.shape == (len(test.X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    majority = max(test.y.mean(), 1 - test.y.mean())
    assert est.score(test.X, test.y) > majority + 0.02
    assert est.n_features_in_ == 6


def test_decreasing_transform_preserves_partitions_on_training_points(small_synthetic):
    train, _ = small_synthetic
    cfg = GbdtConfig(n_trees=10, max_depth=3)
    base = predict_gbdt(train_gbdt(train.X, train.y, cfg), train.X)
    flipped = predict_gbdt(train_gbdt(-train.X, train.y, cfg), -train.X)
    np.testing.assert_allclose(flipped, base, rtol=1e-12)
