"""Classification metrics and a synthetic generator with a planted label hierarchy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Snippet
from .errors import DataError
from .label_tree import LabelTree, TreeNode

__all__ = ["MetricsReport", "compute_metrics", "synth_hierarchy_dataset", "rotate_dataset"]


@dataclass(frozen=True, eq=False)
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_f1: float
    confusion: np.ndarray  # rows = true class, cols = predicted

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_f1": self.macro_f1,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
        }

    def table(self, names=None) -> str:
        C = self.confusion.shape[0]
        names = list(names) if names is not None else [str(c) for c in range(1, C + 1)]
        w = max(8, max(len(n) for n in names))
        lines = [f"{'class':<{w}}   Prec. F1-score   Rec.",]
        for i, n in enumerate(names):
            lines.append(f"{n:<{w}} {100 * self.precision[i]:7.1f} {100 * self.f1[i]:8.1f} {100 * self.recall[i]:6.1f}")
        lines.append("")
        lines.append(f"{'':<{w}}   Prec. F1-score   Acc.")
        lines.append(f"{'overall':<{w}} {100 * self.macro_precision:7.1f} {100 * self.macro_f1:8.1f} "
                     f"{100 * self.accuracy:6.1f}")
        lines.append("(Prec./F1: unweighted class means; Acc.: micro accuracy)")
        return "\n".join(lines) + "\n"


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def compute_metrics(y_true, y_pred, C: int) -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("y_true and y_pred differ in length")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 1 or arr.max() > C):
            raise DataError(f"label outside 1..{C}")
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (y_true - 1, y_pred - 1), 1)
    tp = np.diag(conf).astype(np.float64)
    precision = _ratio(tp, conf.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, conf.sum(axis=1).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    total = conf.sum()
    acc = float(np.trace(conf) / total) if total else 0.0
    return MetricsReport(acc, precision, recall, f1, float(precision.mean()), float(f1.mean()), conf)


def synth_hierarchy_dataset(C: int = 8, M: int = 16, depth: int | None = None, separation: float = 4.0,
                            sigma: float = 0.5, snippets_per_class: int = 20,
                            segments_per_snippet: int = 10, seed: int = 0) -> tuple[Dataset, LabelTree]:
    """Gaussian classes at the leaves of a balanced binary tree.

    A split node ``h`` levels above the leaves places its two children at
    distance ``separation * 2**(h - 1)`` from each other along a random unit
    direction, so siblings deep in the tree are the most confusable pairs.
    Class ``c`` is the ``c``-th leaf from the left.
    """
    if depth is None:
        depth = int(round(np.log2(C))) if C > 0 else 0
    if C < 2 or C != 2**depth:
        raise DataError(f"C must equal 2**depth with C >= 2 (got C={C}, depth={depth})")
    if separation <= 0 or sigma < 0 or M < 1 or snippets_per_class < 1 or segments_per_snippet < 1:
        raise DataError("invalid synthetic dataset shape parameters")
    rng = np.random.default_rng(seed)

    def place(center: np.ndarray, level: int) -> list[np.ndarray]:
        if level == 0:
            return [center]
        u = rng.standard_normal(M)
        u /= np.linalg.norm(u)
        half = 0.5 * separation * 2 ** (level - 1)
        return place(center + half * u, level - 1) + place(center - half * u, level - 1)

    means = place(np.zeros(M), depth)
    snippets = []
    for c in range(1, C + 1):
        for k in range(snippets_per_class):
            segs = means[c - 1] + sigma * rng.standard_normal((segments_per_snippet, M))
            snippets.append(Snippet(f"c{c:02d}_s{k:03d}", c, segs))
    names = tuple(f"class{c:02d}" for c in range(1, C + 1))

    def planted(lo: int, hi: int) -> TreeNode:
        labels = frozenset(range(lo, hi + 1))
        if lo == hi:
            return TreeNode(labels)
        mid = (lo + hi) // 2
        return TreeNode(labels, None, planted(lo, mid), planted(mid + 1, hi))

    # number the split nodes in pre-order
    counter = iter(range(1, C))

    def number(node: TreeNode) -> TreeNode:
        if node.is_leaf:
            return node
        idx = next(counter)
        return TreeNode(node.labels, idx, number(node.left), number(node.right))

    return Dataset(tuple(snippets), names), LabelTree(number(planted(1, C)), names)


def rotate_dataset(dataset: Dataset, seed: int) -> Dataset:
    """Same snippets under a random orthogonal transform of the feature space."""
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((dataset.feature_dim, dataset.feature_dim)))
    Q = Q * np.sign(np.diag(R))
    return Dataset(tuple(Snippet(s.id, s.label, s.segments @ Q) for s in dataset.snippets),
                   dataset.label_names)
