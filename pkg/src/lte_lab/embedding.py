"""Label tree embeddings and auxiliary-category selection.

Each split node of a label tree gets a binary forest separating its left
meta-class (negative) from its right meta-class (positive).  A sample is
embedded as the concatenation of the ``(P(negative), P(positive))`` pairs of
all split nodes, in split-index order; snippets are embedded by averaging
the embeddings of their segments.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _json
from .data import Dataset, SampleSet, Snippet, stratified_kfold_indices
from .errors import DataError
from .forest import ForestConfig, RandomForest, train_forest
from .label_tree import LabelTree, TreeNode, node_seed

__all__ = [
    "SplitClassifier",
    "LTEModel",
    "ClosenessTable",
    "train_lte",
    "embed_segment",
    "embed_snippet",
    "embed_dataset",
    "embed_dataset_out_of_fold",
    "closeness",
    "select_top_categories",
    "save_embeddings",
    "load_embeddings",
]

NEGATIVE, POSITIVE = 0, 1


@dataclass(frozen=True)
class SplitClassifier:
    split_index: int
    left: frozenset[int]
    right: frozenset[int]
    forest: RandomForest  # class ids (0, 1) = (negative/left, positive/right)


class LTEModel:
    def __init__(self, tree: LabelTree, classifiers: Sequence[SplitClassifier], feature_dim: int):
        self.tree = tree
        self.classifiers = tuple(sorted(classifiers, key=lambda c: c.split_index))
        self.feature_dim = int(feature_dim)
        idx = [c.split_index for c in self.classifiers]
        if idx != list(range(1, tree.num_classes)):
            raise DataError(f"expected split classifiers 1..{tree.num_classes - 1}, got {idx}")

    @property
    def dim(self) -> int:
        return 2 * len(self.classifiers)

    def embed(self, X) -> np.ndarray:
        """Embed rows of ``X`` (segments); returns ``(n, 2(C-1))``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise DataError(f"segment dimension {X.shape[1]} != model dimension {self.feature_dim}")
        out = np.empty((X.shape[0], self.dim))
        for k, clf in enumerate(self.classifiers):
            out[:, 2 * k:2 * k + 2] = clf.forest.predict_proba(X)
        return out

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "tree": self.tree.to_dict(),
            "splits": [
                {"split_index": c.split_index, "left": sorted(c.left), "right": sorted(c.right),
                 "forest": c.forest.to_dict()}
                for c in self.classifiers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LTEModel":
        tree = LabelTree.from_dict(d["tree"])
        clfs = [SplitClassifier(s["split_index"], frozenset(s["left"]), frozenset(s["right"]),
                                RandomForest.from_dict(s["forest"])) for s in d["splits"]]
        return cls(tree, clfs, d["feature_dim"])

    def save(self, path: str | Path) -> None:
        _json.dump(self.to_dict(), path, "lte_model")

    @classmethod
    def load(cls, path: str | Path) -> "LTEModel":
        return cls.from_dict(_json.load(path, "lte_model"))


def _train_split(node: TreeNode, samples: SampleSet, forest_config: ForestConfig,
                 seed: int, jobs: int) -> SplitClassifier:
    part = node.partition
    node_set = samples.restrict(sorted(node.labels))
    y = np.where(np.isin(node_set.labels, list(part.right)), POSITIVE, NEGATIVE)
    if y.min() == y.max():
        raise DataError(f"split {node.split_index} has training samples on one side only")
    binary = SampleSet(node_set.features, y, (NEGATIVE, POSITIVE))
    forest = train_forest(binary, forest_config.with_seed(node_seed(seed, node.labels, "lte")),
                          jobs=jobs)
    return SplitClassifier(node.split_index, part.left, part.right, forest)


def train_lte(tree: LabelTree, samples: SampleSet, forest_config: ForestConfig = ForestConfig(),
              seed: int = 0, jobs: int = 1) -> LTEModel:
    """One binary forest per split node, trained on every segment of the node's labels."""
    missing = set(tree.labels) - set(np.unique(samples.labels).tolist())
    if missing:
        raise DataError(f"no training samples for classes {sorted(missing)}")
    nodes = tree.split_nodes()
    # parallelism goes to the trees inside each forest; split order is fixed
    clfs = [_train_split(n, samples, forest_config, seed, jobs) for n in nodes]
    return LTEModel(tree, clfs, samples.feature_dim)


def embed_segment(model: LTEModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("embed_segment takes a single feature vector")
    return model.embed(x[None, :])[0]


def embed_snippet(model: LTEModel, snippet: Snippet) -> np.ndarray:
    return model.embed(snippet.segments).mean(axis=0)


def embed_dataset(model: LTEModel, dataset: Dataset) -> np.ndarray:
    """Snippet-level embeddings, rows in dataset order."""
    if dataset.feature_dim != model.feature_dim:
        raise DataError(f"dataset dimension {dataset.feature_dim} != model dimension {model.feature_dim}")
    X = np.concatenate([s.segments for s in dataset.snippets])
    E = model.embed(X)
    bounds = np.cumsum([0] + [len(s.segments) for s in dataset.snippets])
    return np.stack([E[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])


def embed_dataset_out_of_fold(dataset: Dataset, tree: LabelTree,
                              forest_config: ForestConfig = ForestConfig(), k: int = 10,
                              seed: int = 0, jobs: int = 1) -> np.ndarray:
    """Embed every snippet with split classifiers trained on the other k-1 folds.

    Rows follow dataset order.
    """
    folds = stratified_kfold_indices(dataset.labels, k, seed)
    out = np.empty((len(dataset), 2 * (tree.num_classes - 1)))
    for f, (train_idx, held_idx) in enumerate(folds):
        train = dataset.subset(train_idx)
        model = train_lte(tree, train.segment_samples(), forest_config,
                          seed=node_seed(seed, [f], "fold"), jobs=jobs)
        out[held_idx] = embed_dataset(model, dataset.subset(held_idx))
    return out


# -- auxiliary categories -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClosenessTable:
    """``values[c - 1, y]``: mean scene-class-c probability of aux category y's samples."""

    values: np.ndarray
    scene_classes: tuple[int, ...]
    categories: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"scene_classes": list(self.scene_classes), "categories": list(self.categories),
                "values": self.values.tolist()}


def closeness(scene_forest: RandomForest, aux_sets: Mapping[str, np.ndarray]) -> ClosenessTable:
    cats = list(aux_sets)
    if not cats:
        raise DataError("no auxiliary categories given")
    K = np.empty((scene_forest.num_classes, len(cats)))
    for j, name in enumerate(cats):
        X = np.atleast_2d(np.asarray(aux_sets[name], dtype=np.float64))
        if X.size == 0:
            raise DataError(f"auxiliary category {name!r} has no samples")
        if X.shape[1] != scene_forest.feature_dim:
            raise DataError(
                f"auxiliary category {name!r} has dimension {X.shape[1]}, "
                f"scene forest expects {scene_forest.feature_dim}"
            )
        K[:, j] = scene_forest.predict_proba(X).mean(axis=0)
    return ClosenessTable(K, scene_forest.class_ids, tuple(cats))


def select_top_categories(table: ClosenessTable, n: int) -> dict[int, list[str]]:
    """Per scene class, the ``n`` categories with the largest closeness, descending."""
    n_cat = len(table.categories)
    if n < 1 or n > n_cat:
        raise DataError(f"N exceeds category count: N={n}, {n_cat} categories")
    out = {}
    for i, c in enumerate(table.scene_classes):
        row = table.values[i]
        order = np.lexsort((np.arange(n_cat), -row))
        out[c] = [table.categories[j] for j in order[:n]]
    return out


# -- embedding CSV ------------------------------------------------------------------

def save_embeddings(path: str | Path, ids: Sequence[str], labels: Sequence[str], E: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snippet_id", "label"] + [f"e{i}" for i in range(1, E.shape[1] + 1)])
        for sid, lab, row in zip(ids, labels, E):
            w.writerow([sid, lab] + [repr(float(v)) for v in row])


def load_embeddings(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embedding file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["snippet_id", "label"] or len(header) < 3:
            raise DataError(f"{path}: not an embedding CSV (header {header!r})")
        d = len(header) - 2
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataError(f"{path}:{lineno}: expected {d} embedding values")
            ids.append(row[0])
            labels.append(row[1])
            try:
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no embeddings")
    return ids, labels, np.asarray(rows)
