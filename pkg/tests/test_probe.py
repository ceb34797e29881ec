import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.tree import DecisionTreeClassifier

from corrdistill.corpus import synthetic_corpus
from corrdistill.exceptions import ContractError
from corrdistill.models import EncoderConfig, TeacherModel
from corrdistill.probe import (PROBE_CLASSES, ForestConfig, ProbeDataset, RandomForestProbe,
                               build_probe_dataset, forest_train, grow_tree, probe_accuracy, probe_report)


def blobs(rng, n=100, d=4, gap=6.0):
    X = np.vstack([rng.normal(0, 1, (n, d)), rng.normal(gap, 1, (n, d))])
    y = np.repeat([0, 1], n)
    return X, y


def test_separable_blobs(rng):
    X, y = blobs(rng)
    Xt, yt = blobs(rng, 50)
    forest = RandomForestProbe(n_trees=20, seed=0).fit(X, y)
    assert (forest.predict(Xt) == yt).mean() >= 0.95


def test_random_embeddings_near_chance():
    rng = np.random.default_rng(7)
    X, Xt = rng.normal(size=(400, 16)), rng.normal(size=(200, 16))
    y, yt = np.tile(np.arange(4), 100), np.tile(np.arange(4), 50)
    acc = (RandomForestProbe(n_trees=30, seed=1).fit(X, y).predict(Xt) == yt).mean()
    assert 0.10 <= acc <= 0.40


def test_single_tree_matches_sklearn_cart_on_full_features(rng):
    # with every feature a candidate and no bootstrap, best-Gini splits agree with sklearn's CART
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int) + (X[:, 2] > 1).astype(int)
    ours = grow_tree(X, y, 3, max_depth=3, max_features=3, rng=np.random.default_rng(0))
    ref = DecisionTreeClassifier(max_depth=3, random_state=0).fit(X, y)
    Xt = rng.normal(size=(200, 3))
    pred = np.argmax(ours.counts[ours.apply(Xt)], axis=1)
    assert (pred == ref.predict(Xt)).mean() >= 0.97


def test_degenerate_single_class():
    X = np.random.default_rng(0).normal(size=(10, 3))
    with pytest.warns(UserWarning, match="single class"):
        forest = RandomForestProbe(n_trees=5).fit(X, np.zeros(10, int))
    assert forest.degenerate_
    assert (forest.predict(X) == 0).all()


def test_ties_go_to_lowest_class():
    # two trees, each a single leaf voting for a different class -> 1:1 tie
    forest = RandomForestProbe(n_trees=2, max_depth=0, seed=0)
    X = np.zeros((4, 1))
    forest.fit(X, np.array([0, 1, 1, 0]))
    forest.trees_[0].counts[0] = [1, 0]
    forest.trees_[1].counts[0] = [0, 1]
    assert (forest.predict(X) == 0).all()


def test_duplicated_training_data_is_deterministic(rng):
    X, y = blobs(rng, 30)
    X2, y2 = np.vstack([X, X]), np.concatenate([y, y])
    a = RandomForestProbe(n_trees=10, seed=3).fit(X2, y2).predict(X)
    b = RandomForestProbe(n_trees=10, seed=3).fit(X2, y2).predict(X)
    c = RandomForestProbe(n_trees=10, seed=3).fit(X, y).predict(X)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_sklearn_estimator_protocol(rng):
    forest = RandomForestProbe(n_trees=7, max_depth=3)
    assert forest.get_params()["n_trees"] == 7
    X, y = blobs(rng, 20)
    fitted = clone(forest).fit(X, y)
    assert fitted.score(X, y) == 1.0
    assert fitted.predict_proba(X).sum(axis=1) == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_accuracy_is_weighted_mean_of_per_class(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 4))
    y = rng.integers(0, 3, 60)
    data = ProbeDataset(X[:40], y[:40], X[40:], y[40:], ("a", "b", "c"))
    acc = probe_accuracy(forest_train(data, ForestConfig(n_trees=5, seed=seed)), data)
    counts = np.bincount(data.y_test, minlength=3)
    per = np.nan_to_num(acc["acc_per_class"])
    assert 0.0 <= acc["overall_acc"] <= 1.0
    assert acc["overall_acc"] == pytest.approx((per * counts).sum() / counts.sum())


class _MeanFeatures:
    """Stand-in embedder: log-mel frames reduced to 4 dims."""

    def embed(self, feats):
        return feats[..., :4]


def test_probe_dataset_split_arithmetic():
    corpus = synthetic_corpus(10, seed=1, duration_s=0.25)
    data = build_probe_dataset(_MeanFeatures(), corpus, seed=0)
    assert len(data.X_train) + len(data.X_test) == 40
    assert np.bincount(data.y_train).tolist() == [8] * 4
    assert np.bincount(data.y_test).tolist() == [2] * 4
    assert data.X_train.shape[1] == 4
    again = build_probe_dataset(_MeanFeatures(), corpus, seed=0)
    assert np.array_equal(data.X_test, again.X_test)


def test_probe_rejects_tiny_inputs():
    corpus = synthetic_corpus(1, seed=1, duration_s=0.25)
    with pytest.raises(ContractError):
        build_probe_dataset(_MeanFeatures(), corpus)
    with pytest.raises(ContractError):
        build_probe_dataset(_MeanFeatures(), corpus * 2, classes=PROBE_CLASSES[:1])


def test_teacher_probe_and_report():
    teacher = TeacherModel(EncoderConfig(input_dim=40, model_dim=8, n_heads=2, mlp_dim=8))
    corpus = synthetic_corpus(10, seed=3, duration_s=0.5)
    data = build_probe_dataset(teacher, corpus, seed=0)
    cfg = ForestConfig(n_trees=10)
    acc = probe_accuracy(forest_train(data, cfg), data)
    row = json.loads(probe_report(acc, cfg))
    assert set(row) == {"overall_acc", "acc_per_class", "n_trees", "seed"}
    assert len(row["acc_per_class"]) == 4
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert probe_accuracy(forest_train(data, cfg), data) == acc


def test_forest_config_validation():
    with pytest.raises(ContractError):
        ForestConfig(n_trees=0)
