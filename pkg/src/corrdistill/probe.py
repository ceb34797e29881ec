"""Noise-invariance probe.

Each utterance is distorted with one kind of noise at a time, embedded with a
model's last hidden layer, mean-pooled over frames, and a random forest tries
to recover the distortion class. Lower accuracy means the embeddings carry
less noise information.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .augment import AudioBuffer, DistortionPlan, DistortionSpec, apply_plan, logmel_frontend
from .exceptions import ContractError


def _babble_spec(rng):
    return DistortionSpec("babble", snr_db=rng.uniform(10.0, 20.0))


def _pink_spec(rng):
    return DistortionSpec("pink", snr_db=rng.uniform(10.0, 20.0))


def _reverb_spec(rng):
    return DistortionSpec("reverb", rt60_s=rng.uniform(0.2, 0.6))


def _gaussian_spec(rng):
    return DistortionSpec("gaussian", snr_db=rng.uniform(10.0, 20.0))


PROBE_CLASSES: tuple[tuple[str, Callable], ...] = (
    ("babble", _babble_spec),
    ("pink", _pink_spec),
    ("reverb", _reverb_spec),
    ("gaussian", _gaussian_spec),
)


@dataclass
class ProbeDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.X_train.ndim != 2 or self.X_test.ndim != 2 or self.X_train.shape[1] != self.X_test.shape[1]:
            raise ContractError("probe vectors must share one dimension")


def build_probe_dataset(
    model,
    corpus: Sequence[AudioBuffer],
    classes: Sequence[tuple[str, Callable]] = PROBE_CLASSES,
    seed: int = 0,
    test_fraction: float = 0.2,
    n_mels: int = 40,
    chunk: int = 32,
) -> ProbeDataset:
    """Mean-pooled last-layer embeddings for every (utterance, distortion class).

    ``model`` needs an ``embed(features) -> (..., T, D)`` method. The split is
    made over utterances, so every class keeps the same 80/20 proportions.
    """
    if len(corpus) < 2:
        raise ContractError(f"probe needs at least 2 utterances per class, got {len(corpus)}")
    if len(classes) < 2:
        raise ContractError("probe needs at least two distortion classes")
    views, labels, owners = [], [], []
    for i, clean in enumerate(corpus):
        for label, (_, make_spec) in enumerate(classes):
            rng = np.random.default_rng([seed, i, label])
            plan = DistortionPlan((make_spec(rng),), int(rng.integers(0, 2**31)))
            views.append(logmel_frontend(apply_plan(clean, plan), n_mels))
            labels.append(label)
            owners.append(i)
    vectors = []
    for start in range(0, len(views), chunk):
        z = model.embed(np.stack(views[start : start + chunk]))
        vectors.append(z.mean(axis=-2))
    X = np.concatenate(vectors)
    y = np.array(labels)
    owners = np.array(owners)

    n = len(corpus)
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    order = np.random.default_rng([seed, 0xDA7A]).permutation(n)
    test_mask = np.isin(owners, order[:n_test])
    return ProbeDataset(X[~test_mask], y[~test_mask], X[test_mask], y[test_mask], tuple(c[0] for c in classes))


# ---------------------------------------------------------------- CART / forest


class _Tree:
    """Array-backed binary tree; leaves hold class counts."""

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.counts: list[np.ndarray] = []

    def add(self, counts) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append(counts)
        return len(self.feature) - 1

    def freeze(self):
        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.counts = np.array(self.counts)
        return self

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        while True:
            inner = self.feature[node] >= 0
            if not inner.any():
                return node
            idx = np.nonzero(inner)[0]
            go_left = X[idx, self.feature[node[idx]]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])


def _gini(counts: np.ndarray) -> np.ndarray:
    total = counts.sum(axis=-1)
    safe = np.where(total > 0, total, 1)
    return 1.0 - ((counts / safe[..., None]) ** 2).sum(axis=-1)


def _best_split(X, Y, features):
    """Best (gain, feature, threshold) over candidate features by weighted Gini."""
    n = len(X)
    parent = _gini(Y.sum(axis=0))
    best = (0.0, -1, 0.0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(Y[order], axis=0)[:-1]
        right = Y.sum(axis=0) - left
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        n_left = np.arange(1, n)
        impurity = (n_left * _gini(left) + (n - n_left) * _gini(right)) / n
        impurity = np.where(valid, impurity, np.inf)
        k = int(np.argmin(impurity))
        gain = parent - impurity[k]
        if gain > best[0] + 1e-12:
            best = (gain, f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def grow_tree(X, y, n_classes, max_depth, max_features, rng, min_samples_split=2) -> _Tree:
    tree = _Tree()
    Y = np.eye(n_classes)[y]
    stack = [(np.arange(len(X)), 0, tree.add(Y.sum(axis=0)))]
    while stack:
        idx, depth, node = stack.pop()
        counts = tree.counts[node]
        if depth >= max_depth or len(idx) < min_samples_split or np.count_nonzero(counts) <= 1:
            continue
        features = rng.choice(X.shape[1], size=min(max_features, X.shape[1]), replace=False)
        gain, f, thr = _best_split(X[idx], Y[idx], features)
        if f < 0:
            continue
        mask = X[idx, f] <= thr
        tree.feature[node], tree.threshold[node] = int(f), float(thr)
        li, ri = idx[mask], idx[~mask]
        tree.left[node] = tree.add(Y[li].sum(axis=0))
        tree.right[node] = tree.add(Y[ri].sum(axis=0))
        stack.append((ri, depth + 1, tree.right[node]))
        stack.append((li, depth + 1, tree.left[node]))
    return tree.freeze()


class RandomForestProbe(ClassifierMixin, BaseEstimator):
    """Bagged Gini CART trees with per-node feature subsampling.

    Parameters
    ----------
    n_trees : int
        Number of trees, each grown on a full-size bootstrap resample.
    max_depth : int
    max_features : int or None
        Candidate features per node; ``None`` means ceil(sqrt(n_features)).
    seed : int
    """

    def __init__(self, n_trees=100, max_depth=8, max_features=None, seed=0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.max_features = max_features
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.degenerate_ = len(self.classes_) == 1
        if self.degenerate_:
            warnings.warn("probe training data holds a single class; forest predicts it everywhere")
        max_features = self.max_features or math.ceil(math.sqrt(X.shape[1]))
        self.trees_ = []
        for t in range(self.n_trees):
            rng = np.random.default_rng([self.seed, t])
            boot = rng.integers(0, len(X), size=len(X))
            self.trees_.append(
                grow_tree(X[boot], y_idx[boot], len(self.classes_), self.max_depth, max_features, rng)
            )
        return self

    def _votes(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64)
        votes = np.zeros((len(X), len(self.classes_)))
        rows = np.arange(len(X))
        for tree in self.trees_:
            leaf_counts = tree.counts[tree.apply(X)]
            votes[rows, np.argmax(leaf_counts, axis=1)] += 1
        return votes

    def predict_proba(self, X):
        return self._votes(X) / len(self.trees_)

    def predict(self, X):
        # argmax returns the first maximum: ties go to the lowest class index
        return self.classes_[np.argmax(self._votes(X), axis=1)]


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    max_features: int = 0  # 0 -> ceil(sqrt(D))
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ContractError(f"n_trees must be >= 1, got {self.n_trees}")


def forest_train(data: ProbeDataset, cfg: ForestConfig = ForestConfig()) -> RandomForestProbe:
    if len(data.X_train) == 0:
        raise ContractError("probe train split is empty")
    forest = RandomForestProbe(cfg.n_trees, cfg.max_depth, cfg.max_features or None, cfg.seed)
    return forest.fit(data.X_train, data.y_train)


def probe_accuracy(forest: RandomForestProbe, data: ProbeDataset) -> dict:
    """Overall and per-class accuracy on the test split."""
    if len(data.X_test) == 0:
        raise ContractError("probe test split is empty")
    pred = forest.predict(data.X_test)
    correct = pred == data.y_test
    per_class = []
    for label in range(len(data.class_names)):
        mask = data.y_test == label
        per_class.append(float(correct[mask].mean()) if mask.any() else float("nan"))
    return {"overall_acc": float(correct.mean()), "acc_per_class": per_class}


def probe_report(accuracy: dict, cfg: ForestConfig) -> str:
    row = {
        "overall_acc": accuracy["overall_acc"],
        "acc_per_class": accuracy["acc_per_class"],
        "n_trees": cfg.n_trees,
        "seed": cfg.seed,
    }
    return json.dumps(row)


def run_probe(model, corpus, cfg: ForestConfig = ForestConfig(), seed: int = 0, n_mels: int = 40) -> dict:
    data = build_probe_dataset(model, corpus, seed=seed, n_mels=n_mels)
    return probe_accuracy(forest_train(data, cfg), data)
