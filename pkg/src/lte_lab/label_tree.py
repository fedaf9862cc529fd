"""Learning a binary label tree from classifier confusion.

At every node with label set ``labels`` the node's segments are halved per
class; a forest trained on one half is evaluated on the other to obtain a
row-stochastic confusion matrix.  Its symmetric part is an affinity between
labels, and a two-way spectral clustering of that affinity picks the split
that keeps mutually confusable labels on the same side.
"""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import _json
from .data import Dataset, SampleSet, stratified_split
from .errors import DataError
from .forest import ForestConfig, RandomForest, train_forest
from .linalg import jacobi_eigh

__all__ = [
    "ConfusionMatrix",
    "SymmetricAffinity",
    "Partition",
    "TreeNode",
    "LabelTree",
    "confusion_matrix",
    "symmetrize",
    "partition_objective",
    "enumerate_partitions",
    "brute_force_partition",
    "spectral_candidates",
    "spectral_partition",
    "build_label_tree",
    "node_seed",
]

ZERO_DEGREE = 1e-12


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    entries: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        A = np.array(self.entries, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(self.labels):
            raise DataError("confusion matrix must be square and match its labels")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)
        object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))


@dataclass(frozen=True, eq=False)
class SymmetricAffinity:
    entries: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        A = np.array(self.entries, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != len(self.labels):
            raise DataError("affinity must be square and match its labels")
        if not np.array_equal(A, A.T):
            raise DataError("affinity matrix is not symmetric")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)
        object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Partition:
    left: frozenset[int]
    right: frozenset[int]

    def __post_init__(self):
        left, right = frozenset(self.left), frozenset(self.right)
        if not left or not right:
            raise DataError("both sides of a partition must be nonempty")
        if left & right:
            raise DataError("partition sides overlap")
        # orientation: the side holding the smallest label is the left one
        if min(right) < min(left):
            left, right = right, left
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    @property
    def labels(self) -> frozenset[int]:
        return self.left | self.right

    def __repr__(self) -> str:
        return f"Partition({sorted(self.left)} | {sorted(self.right)})"


# -- confusion and objective --------------------------------------------------------

def confusion_matrix(forest: RandomForest, eval_set: SampleSet) -> ConfusionMatrix:
    """Mean predicted probability of class j over evaluation samples of class i."""
    labels = eval_set.restricted_labels
    if tuple(forest.class_ids) != tuple(labels):
        raise DataError(f"forest classes {forest.class_ids} differ from eval labels {labels}")
    P = np.atleast_2d(forest.predict_proba(eval_set.features)) if len(eval_set) else None
    A = np.empty((len(labels), len(labels)))
    for i, c in enumerate(labels):
        rows = eval_set.labels == c
        if not np.any(rows):
            raise DataError(f"class {c} has no evaluation samples")
        A[i] = P[rows].mean(axis=0)
    return ConfusionMatrix(A, labels)


def symmetrize(A: ConfusionMatrix) -> SymmetricAffinity:
    M = A.entries
    S = (M + M.T) / 2.0
    # floating addition is commutative, so S is already exactly symmetric
    return SymmetricAffinity(S, A.labels)


def _mask(A: SymmetricAffinity, side: frozenset[int]) -> np.ndarray:
    return np.array([c in side for c in A.labels])


def partition_objective(A: SymmetricAffinity, p: Partition) -> float:
    """Within-block affinity of both sides, diagonal terms included."""
    if p.labels != frozenset(A.labels):
        raise DataError(f"{p} does not partition labels {A.labels}")
    L = _mask(A, p.left)
    R = ~L
    M = A.entries
    return float(M[np.ix_(L, L)].sum() + M[np.ix_(R, R)].sum())


def enumerate_partitions(labels: Sequence[int]) -> Iterator[Partition]:
    """All 2^(n-1) - 1 unordered two-way splits; the smallest label always sits left.

    Order: left sets (each containing the smallest label) in lexicographic order
    of their sorted label tuples.
    """
    labels = sorted(labels)
    first, rest = labels[0], labels[1:]
    lefts = []
    for r in range(0, len(rest)):
        for combo in itertools.combinations(rest, r):
            lefts.append((first,) + combo)
    lefts.sort()
    for left in lefts:
        yield Partition(frozenset(left), frozenset(labels) - frozenset(left))


def brute_force_partition(A: SymmetricAffinity) -> tuple[Partition, float, int]:
    """Exhaustive maximiser of the partition objective.

    Returns ``(partition, best_value, n_candidates)``.  Ties go to the first
    candidate in :func:`enumerate_partitions` order.
    """
    n = A.size
    if not 2 <= n <= 20:
        raise DataError(f"brute force supports 2..20 labels, got {n}")
    best, best_e, count = None, -np.inf, 0
    for p in enumerate_partitions(A.labels):
        count += 1
        e = partition_objective(A, p)
        if e > best_e:
            best, best_e = p, e
    return best, best_e, count


# -- spectral relaxation ----------------------------------------------------------

def _two_means_on_circle(Y: np.ndarray) -> np.ndarray:
    """Exact 2-means for unit-norm rows in the plane.

    Points on a circle separated by a line form two contiguous arcs in
    angular order, so every arc split is tried and the lowest within-cluster
    sum of squares wins.  Returns a boolean membership vector.
    """
    n = Y.shape[0]
    angles = np.arctan2(Y[:, 1], Y[:, 0])
    order = np.lexsort((np.arange(n), np.round(angles, 12)))
    best_cost, best = np.inf, None
    for start in range(n):
        for length in range(1, n):
            member = np.zeros(n, dtype=bool)
            member[order[(start + np.arange(length)) % n]] = True
            a, b = Y[member], Y[~member]
            cost = ((a - a.mean(0)) ** 2).sum() + ((b - b.mean(0)) ** 2).sum()
            if cost < best_cost - 1e-12:
                best_cost, best = cost, member
    return best


def spectral_candidates(A: SymmetricAffinity) -> list[np.ndarray]:
    """Candidate splits (boolean memberships) read off the spectral embedding.

    The affinity is normalised as ``D^-1/2 A D^-1/2``.  Candidates are the
    exact 2-means split of the unit-normalised rows of the two leading
    eigenvectors, followed by every threshold ("sweep") cut along the second
    and third random-walk eigenvectors ``D^-1/2 v``.
    """
    n = A.size
    W = A.entries
    d = W.sum(axis=1)
    d = np.where(d > 0, d, ZERO_DEGREE)
    inv = 1.0 / np.sqrt(d)
    N = W * inv[:, None] * inv[None, :]
    N = 0.5 * (N + N.T)
    _, V = jacobi_eigh(N)
    Y = V[:, :2].copy()
    norms = np.linalg.norm(Y, axis=1)
    Y[norms > 0] /= norms[norms > 0, None]
    Y[norms == 0] = (1.0, 0.0)
    candidates = [_two_means_on_circle(Y)]
    for k in range(1, min(3, n)):
        f = np.round(V[:, k] * inv, 12)
        order = np.lexsort((np.arange(n), f))
        for cut in range(1, n):
            member = np.zeros(n, dtype=bool)
            member[order[:cut]] = True
            candidates.append(member)
    return candidates


def spectral_partition(A: SymmetricAffinity, seed: int = 0) -> Partition:
    """Two-way spectral clustering of the label affinity.

    Among the candidates of :func:`spectral_candidates` the one with the
    highest within-block affinity is returned (first candidate wins ties).
    Every candidate is a proper split, so both sides are always nonempty.
    The solver consumes no randomness; ``seed`` is accepted so the call
    signature matches the other randomised stages.
    """
    del seed
    n = A.size
    labels = A.labels
    if n < 2:
        raise DataError("spectral partition needs at least two labels")
    if n == 2:
        return Partition(frozenset([labels[0]]), frozenset([labels[1]]))
    best, best_e = None, -np.inf
    for member in spectral_candidates(A):
        p = Partition(frozenset(c for c, m in zip(labels, member) if m),
                      frozenset(c for c, m in zip(labels, member) if not m))
        e = partition_objective(A, p)
        if e > best_e + 1e-12:
            best, best_e = p, e
    return best


# -- label tree ---------------------------------------------------------------------

@dataclass(frozen=True)
class TreeNode:
    labels: frozenset[int]
    split_index: int | None = None  # 1-based pre-order index for split nodes
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def partition(self) -> Partition | None:
        if self.is_leaf:
            return None
        return Partition(self.left.labels, self.right.labels)


class LabelTree:
    """Binary tree over class labels with split nodes numbered 1..C-1 in pre-order."""

    def __init__(self, root: TreeNode, label_names: Sequence[str] | None = None):
        self.root = root
        self.label_names = tuple(label_names) if label_names is not None else None
        self._validate()

    @classmethod
    def from_partitions(cls, labels, split_fn, label_names=None) -> "LabelTree":
        """Grow a tree by calling ``split_fn(label_set) -> Partition`` recursively."""
        counter = itertools.count(1)

        def grow(ls: frozenset[int]) -> TreeNode:
            if len(ls) == 1:
                return TreeNode(ls)
            idx = next(counter)
            p = split_fn(ls)
            if p.labels != ls:
                raise DataError(f"split of {sorted(ls)} returned {p}")
            return TreeNode(ls, idx, grow(p.left), grow(p.right))

        return cls(grow(frozenset(labels)), label_names)

    def _validate(self):
        seen_idx = []
        leaves = []
        for node in self.preorder():
            if node.is_leaf:
                if node.right is not None or len(node.labels) != 1:
                    raise DataError("leaves must hold a single label")
                leaves.append(next(iter(node.labels)))
            else:
                if node.right is None:
                    raise DataError("split node without a right child")
                Partition(node.left.labels, node.right.labels)
                if node.left.labels | node.right.labels != node.labels:
                    raise DataError("children do not partition their parent")
                seen_idx.append(node.split_index)
        C = len(self.root.labels)
        if sorted(leaves) != sorted(self.root.labels) or len(leaves) != C:
            raise DataError("leaf labels do not match the root label set")
        if seen_idx != list(range(1, C)):
            raise DataError("split indices must be 1..C-1 in pre-order")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(sorted(self.root.labels))

    @property
    def num_classes(self) -> int:
        return len(self.root.labels)

    def preorder(self) -> Iterator[TreeNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def split_nodes(self) -> list[TreeNode]:
        return [n for n in self.preorder() if not n.is_leaf]

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.preorder() if n.is_leaf]

    # serialization
    def to_dict(self) -> dict:
        nodes = []
        ids = {}
        for i, node in enumerate(self.preorder()):
            ids[id(node)] = i
        for node in self.preorder():
            nodes.append({
                "id": ids[id(node)],
                "labels": sorted(node.labels),
                "split_index": node.split_index,
                "left": None if node.is_leaf else ids[id(node.left)],
                "right": None if node.is_leaf else ids[id(node.right)],
            })
        return {"label_names": list(self.label_names) if self.label_names else None, "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelTree":
        raw = {n["id"]: n for n in d["nodes"]}

        def build(i: int) -> TreeNode:
            n = raw[i]
            if n["left"] is None:
                return TreeNode(frozenset(n["labels"]))
            return TreeNode(frozenset(n["labels"]), n["split_index"], build(n["left"]), build(n["right"]))

        return cls(build(0), d.get("label_names"))

    def save(self, path: str | Path) -> None:
        _json.dump(self.to_dict(), path, "label_tree")

    @classmethod
    def load(cls, path: str | Path) -> "LabelTree":
        return cls.from_dict(_json.load(path, "label_tree"))

    def render(self) -> str:
        """Indented text dump, one node per line."""
        def name(c: int) -> str:
            return self.label_names[c - 1] if self.label_names else str(c)

        lines = []

        def walk(node: TreeNode, depth: int, side: str):
            pad = "  " * depth
            members = ", ".join(name(c) for c in sorted(node.labels))
            if node.is_leaf:
                lines.append(f"{pad}{side}{members}")
            else:
                lines.append(f"{pad}{side}[split {node.split_index}] {{{members}}}")
                walk(node.left, depth + 1, "L: ")
                walk(node.right, depth + 1, "R: ")

        walk(self.root, 0, "")
        return "\n".join(lines) + "\n"

    def same_structure(self, other: "LabelTree") -> bool:
        def key(node: TreeNode):
            if node.is_leaf:
                return tuple(node.labels)
            return frozenset([key(node.left), key(node.right)])
        return key(self.root) == key(other.root)


def node_seed(seed: int, labels, salt: str = "") -> int:
    """Deterministic 31-bit seed derived from a base seed and a label set."""
    text = f"{int(seed)}|{salt}|{','.join(str(c) for c in sorted(labels))}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


def node_affinity(samples: SampleSet, labels, forest_config: ForestConfig, seed: int,
                  jobs: int = 1) -> SymmetricAffinity:
    """Half-split the node's samples, fit a forest on one half, confuse it on the other."""
    node_set = samples.restrict(sorted(labels))
    train, held = stratified_split(node_set, 0.5, node_seed(seed, labels, "split"))
    forest = train_forest(train, forest_config.with_seed(node_seed(seed, labels, "forest")),
                          jobs=jobs, class_ids=node_set.restricted_labels)
    return symmetrize(confusion_matrix(forest, held))


def build_label_tree(dataset: Dataset, forest_config: ForestConfig = ForestConfig(),
                     seed: int = 0, jobs: int = 1) -> LabelTree:
    samples = dataset.segment_samples()
    counts = np.bincount(samples.labels, minlength=dataset.num_classes + 1)[1:]
    if np.any(counts < 2):
        bad = [dataset.label_names[i] for i in np.flatnonzero(counts < 2)]
        raise DataError(f"classes with fewer than 2 segments: {bad}")

    def split(ls: frozenset[int]) -> Partition:
        if len(ls) == 2:
            a, b = sorted(ls)
            return Partition(frozenset([a]), frozenset([b]))
        A = node_affinity(samples, ls, forest_config, seed, jobs)
        return spectral_partition(A, node_seed(seed, ls, "spectral"))

    return LabelTree.from_partitions(range(1, dataset.num_classes + 1), split, dataset.label_names)
