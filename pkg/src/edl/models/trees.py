"""CART classification trees (Gini) and random forests with per-split feature sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..simplex import DEFAULT_EPSILON, PredictionSet, SeededRng, TabularDataset, as_generator, pad_probs

# a split must lower the weighted Gini impurity by more than this
MIN_DECREASE = 1e-12


@dataclass
class TreeNode:
    value: np.ndarray  # padded class frequencies
    feature: int = -1
    threshold: float = math.nan
    left: TreeNode | None = None
    right: TreeNode | None = None
    n_samples: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class DecisionTree:
    root: TreeNode
    num_classes: int
    max_depth: int | None
    feature_fraction: float
    epsilon: float = DEFAULT_EPSILON
    _flat: tuple = field(default=None, repr=False)

    @property
    def depth(self) -> int:
        def rec(node):
            return 0 if node.is_leaf else 1 + max(rec(node.left), rec(node.right))
        return rec(self.root)

    @property
    def num_leaves(self) -> int:
        def rec(node):
            return 1 if node.is_leaf else rec(node.left) + rec(node.right)
        return rec(self.root)

    def _arrays(self):
        if self._flat is None:
            feats, thr, left, right, values = [], [], [], [], []
            stack = [self.root]
            index = {id(self.root): 0}
            order = []
            while stack:
                node = stack.pop()
                order.append(node)
                for child in (node.left, node.right):
                    if child is not None:
                        index[id(child)] = len(index)
                        stack.append(child)
            order.sort(key=lambda n: index[id(n)])
            for node in order:
                feats.append(node.feature)
                thr.append(node.threshold)
                left.append(index[id(node.left)] if node.left is not None else -1)
                right.append(index[id(node.right)] if node.right is not None else -1)
                values.append(node.value)
            self._flat = (np.array(feats), np.array(thr), np.array(left), np.array(right), np.array(values))
        return self._flat

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        feats, thr, left, right, values = self._arrays()
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = left[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[rows[active], feats[n]] <= thr[n]
            node[active] = np.where(go_left, left[n], right[n])
            active = left[node] >= 0
        return values[node]


def _gini_from_counts(counts, totals):
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / totals[..., None]
    return 1.0 - np.nansum(p * p, axis=-1)


def _best_split(X, y, num_classes, features):
    """Exhaustive midpoint search over the given features.

    Returns (feature, threshold, weighted child impurity) or None. Ties go to
    the lowest feature index, then the lowest threshold.
    """
    n = y.shape[0]
    onehot = np.eye(num_classes)[y]
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left_counts = np.cumsum(onehot[order], axis=0)[:-1]
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        n_left = np.arange(1, n, dtype=np.float64)
        right_counts = left_counts[-1] + onehot[order[-1]] - left_counts
        imp = (n_left * _gini_from_counts(left_counts, n_left)
               + (n - n_left) * _gini_from_counts(right_counts, n - n_left)) / n
        imp = np.where(valid, imp, np.inf)
        k = int(np.argmin(imp))
        if best is None or imp[k] < best[2] - MIN_DECREASE:
            best = (f, 0.5 * (xs[k] + xs[k + 1]), float(imp[k]))
    return best


def fit_tree(dataset: TabularDataset, max_depth=None, feature_fraction=1.0, rng=0,
             epsilon=DEFAULT_EPSILON) -> DecisionTree:
    """Greedy CART. ``max_depth=None`` grows until leaves are pure or unsplittable."""
    if len(dataset) == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    if not (0 < feature_fraction <= 1):
        raise ValueError("feature_fraction must be in (0, 1]")
    gen = as_generator(rng)
    X, y, C = dataset.features, dataset.labels, dataset.num_classes
    F = X.shape[1]
    k = max(1, math.ceil(feature_fraction * F - 1e-12))

    def leaf_value(idx):
        freq = np.bincount(y[idx], minlength=C) / idx.size
        return pad_probs(freq, epsilon)

    def grow(idx, depth):
        node = TreeNode(leaf_value(idx), n_samples=int(idx.size))
        counts = np.bincount(y[idx], minlength=C)
        if (max_depth is not None and depth >= max_depth) or np.count_nonzero(counts) <= 1 or idx.size < 2:
            return node
        parent = 1.0 - np.sum((counts / idx.size) ** 2)
        features = gen.choice(F, size=k, replace=False) if k < F else np.arange(F)
        split = _best_split(X[idx], y[idx], C, features)
        if split is None or split[2] >= parent - MIN_DECREASE:
            return node
        f, t, _ = split
        mask = X[idx, f] <= t
        node.feature, node.threshold = int(f), float(t)
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node

    root = grow(np.arange(len(dataset)), 0)
    return DecisionTree(root, C, max_depth, feature_fraction, epsilon)


def fit_forest(dataset: TabularDataset, num_trees, max_depth=None, feature_fraction=0.7, seed=0,
               bootstrap=True, epsilon=DEFAULT_EPSILON) -> list[DecisionTree]:
    """Independent trees, each with its own child stream (and bootstrap sample if enabled)."""
    root = SeededRng(seed)
    trees = []
    for t in range(num_trees):
        gen = root.child("tree", t).generator()
        data = dataset
        if bootstrap:
            data = dataset.subset(gen.integers(0, len(dataset), size=len(dataset)))
        trees.append(fit_tree(data, max_depth, feature_fraction, gen, epsilon))
    return trees


def tree_predict(tree: DecisionTree, X, labels=None) -> PredictionSet:
    return PredictionSet(tree.predict_proba(X)[None], labels)


def forest_predict(trees, X, labels=None) -> PredictionSet:
    """Each tree is one ensemble member."""
    return PredictionSet(np.stack([t.predict_proba(X) for t in trees]), labels)
