"""Probabilistic random forests of CART trees grown with Gini impurity.

Each tree is grown on a bootstrap resample and examines a random subset of
``features_per_split`` features at every node.  Leaves store the class
frequency histogram of the training points that reach them; the forest
probability is the unweighted mean of the leaf histograms over all trees.

Tree growing and traversal are compiled with numba; the per-tree RNG is
seeded inside the compiled code, so results do not depend on which thread
grows which tree.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from . import _json
from .data import SampleSet
from .errors import DataError

__all__ = [
    "ForestConfig",
    "DecisionTree",
    "RandomForest",
    "train_forest",
    "predict_proba",
    "predict_class",
]


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 200
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(M))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise DataError("num_trees must be >= 1")
        if self.min_leaf < 1:
            raise DataError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise DataError("max_depth must be >= 0 or unlimited")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise DataError("features_per_split must be >= 1")

    def mtry(self, M: int) -> int:
        m = self.features_per_split or math.ceil(math.sqrt(M))
        if m > M:
            raise DataError(f"features_per_split={m} exceeds feature dimension {M}")
        return m

    def with_seed(self, seed: int) -> "ForestConfig":
        return ForestConfig(**{**asdict(self), "seed": int(seed)})


# -- compiled kernels -----------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _grow_tree(X, y, n_classes, max_depth, min_leaf, mtry, bootstrap, seed):
    np.random.seed(seed)
    n, M = X.shape
    if bootstrap:
        sample = np.empty(n, np.int64)
        for i in range(n):
            sample[i] = np.random.randint(0, n)
    else:
        sample = np.arange(n)

    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros((cap, n_classes))

    # explicit stack of (node, start, end, depth) over the sample buffer
    stack = np.empty((cap, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    counts = np.zeros(n_classes)
    left_counts = np.zeros(n_classes)
    feats = np.arange(M)
    vals = np.empty(n)
    order = np.empty(n, np.int64)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start

        counts[:] = 0.0
        for t in range(start, end):
            counts[y[sample[t]]] += 1.0
        for c in range(n_classes):
            value[node, c] = counts[c] / m

        pure = False
        for c in range(n_classes):
            if counts[c] == m:
                pure = True
        if pure or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        parent_score = 0.0
        for c in range(n_classes):
            parent_score += counts[c] * counts[c]
        parent_score /= m

        best_score = parent_score
        best_feat = -1
        best_thr = 0.0

        # partial Fisher-Yates over features; constant features do not count
        # toward mtry (they are skipped and another one is drawn)
        for i in range(M):
            feats[i] = i
        examined = 0
        for i in range(M):
            if examined >= mtry:
                break
            j = i + np.random.randint(0, M - i)
            tmp = feats[i]
            feats[i] = feats[j]
            feats[j] = tmp
            f = feats[i]

            for t in range(m):
                vals[t] = X[sample[start + t], f]
            idx = np.argsort(vals[:m], kind="mergesort")
            if vals[idx[m - 1]] <= vals[idx[0]]:
                continue
            examined += 1
            for t in range(m):
                order[t] = sample[start + idx[t]]

            left_counts[:] = 0.0
            sum_l = 0.0  # sum of squared left counts
            sum_r = parent_score * m
            for t in range(m - 1):
                c = y[order[t]]
                lc = left_counts[c]
                rc = counts[c] - lc
                sum_l += 2.0 * lc + 1.0
                sum_r -= 2.0 * rc - 1.0
                left_counts[c] = lc + 1.0
                n_l = t + 1
                n_r = m - n_l
                if n_l < min_leaf or n_r < min_leaf:
                    continue
                v_lo = vals[idx[t]]
                v_hi = vals[idx[t + 1]]
                if v_hi <= v_lo:
                    continue
                # maximising sum_k n_k^2 / n_side minimises weighted Gini
                score = sum_l / n_l + sum_r / n_r
                if score > best_score + 1e-12:
                    best_score = score
                    best_feat = f
                    thr = 0.5 * (v_lo + v_hi)
                    if thr >= v_hi:
                        thr = v_lo
                    best_thr = thr

        if best_feat < 0:
            continue

        # partition the sample buffer in place: x <= thr goes left
        lo = start
        hi = end - 1
        while lo <= hi:
            if X[sample[lo], best_feat] <= best_thr:
                lo += 1
            else:
                tmp = sample[lo]
                sample[lo] = sample[hi]
                sample[hi] = tmp
                hi -= 1
        mid = lo

        feature[node] = best_feat
        threshold[node] = best_thr
        l_id = n_nodes
        r_id = n_nodes + 1
        n_nodes += 2
        left[node] = l_id
        right[node] = r_id
        # push right first so the left subtree is numbered first
        stack[top, 0] = r_id
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = l_id
        stack[top, 1] = start
        stack[top, 2] = mid
        stack[top, 3] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@numba.njit(cache=True, nogil=True)
def _forest_proba(X, offsets, feature, threshold, left, right, value):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    K = value.shape[1]
    out = np.zeros((n, K))
    for i in range(n):
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            for c in range(K):
                out[i, c] += value[base + node, c]
        for c in range(K):
            out[i, c] /= n_trees
    return out


# -- public types -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flattened binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # per-node class histogram, rows sum to 1

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def to_dict(self) -> dict:
        leaves = self.feature < 0
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) if not leaf else 0.0 for t, leaf in zip(self.threshold, leaves)],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            # histograms only matter at leaves
            "leaf_value": {str(i): self.value[i].tolist() for i in np.flatnonzero(leaves)},
        }

    @classmethod
    def from_dict(cls, d: dict, n_classes: int) -> "DecisionTree":
        feature = np.asarray(d["feature"], dtype=np.int64)
        value = np.zeros((feature.size, n_classes))
        for k, v in d["leaf_value"].items():
            value[int(k)] = v
        return cls(feature, np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   value)


class RandomForest:
    """Trained forest; immutable after construction."""

    def __init__(self, trees: Sequence[DecisionTree], class_ids: Sequence[int],
                 feature_dim: int, config: ForestConfig):
        self.trees = tuple(trees)
        self.class_ids = tuple(int(c) for c in class_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise DataError("duplicate class ids")
        self.feature_dim = int(feature_dim)
        self.config = config
        self._pack()

    def _pack(self):
        # tree leaves store only their histograms; internal rows are ignored
        sizes = [t.n_nodes for t in self.trees]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([t.left for t in self.trees])
        self._right = np.concatenate([t.right for t in self.trees])
        self._value = np.concatenate([t.value for t in self.trees])

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.ndim != 2 or X2.shape[1] != self.feature_dim:
            raise DataError(
                f"input dimension {X2.shape[-1]} does not match forest dimension {self.feature_dim}"
            )
        P = _forest_proba(np.ascontiguousarray(X2), self._offsets, self._feature,
                          self._threshold, self._left, self._right, self._value)
        return P[0] if single else P

    def predict(self, X) -> np.ndarray:
        P = np.atleast_2d(self.predict_proba(X))
        # class_ids ascending, argmax picks the first maximum -> smallest id on ties
        return np.asarray(self.class_ids)[np.argmax(P, axis=1)]

    # serialization
    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "class_ids": list(self.class_ids),
            "feature_dim": self.feature_dim,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        class_ids = d["class_ids"]
        trees = [DecisionTree.from_dict(t, len(class_ids)) for t in d["trees"]]
        return cls(trees, class_ids, d["feature_dim"], ForestConfig(**d["config"]))

    def save(self, path: str | Path) -> None:
        _json.dump(self.to_dict(), path, "random_forest")

    @classmethod
    def load(cls, path: str | Path) -> "RandomForest":
        return cls.from_dict(_json.load(path, "random_forest"))


def train_forest(samples: SampleSet, config: ForestConfig = ForestConfig(), jobs: int = 1,
                 class_ids: Sequence[int] | None = None) -> RandomForest:
    """Grow ``config.num_trees`` trees; tree ``t`` uses seed ``config.seed + t``.

    ``class_ids`` defaults to the sorted distinct labels present in ``samples``.
    """
    if len(samples) == 0:
        raise DataError("cannot train a forest on an empty sample set")
    X = np.ascontiguousarray(samples.features)
    labels = samples.labels
    if class_ids is None:
        class_ids = np.unique(labels)
    class_ids = np.sort(np.asarray(class_ids, dtype=np.int64))
    if not np.all(np.isin(labels, class_ids)):
        raise DataError("sample labels outside the forest's class ids")
    y = np.searchsorted(class_ids, labels).astype(np.int64)
    mtry = config.mtry(X.shape[1])
    max_depth = -1 if config.max_depth is None else int(config.max_depth)

    def grow(t: int) -> DecisionTree:
        arrays = _grow_tree(X, y, len(class_ids), max_depth, config.min_leaf, mtry,
                            config.bootstrap, (config.seed + t) % (2**32))
        return DecisionTree(*arrays)

    if jobs > 1 and config.num_trees > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(grow, range(config.num_trees)))
    else:
        trees = [grow(t) for t in range(config.num_trees)]
    return RandomForest(trees, class_ids.tolist(), X.shape[1], config)


def predict_proba(forest: RandomForest, x) -> np.ndarray:
    return forest.predict_proba(x)


def predict_class(forest: RandomForest, x):
    pred = forest.predict(x)
    return int(pred[0]) if np.ndim(x) == 1 else pred
