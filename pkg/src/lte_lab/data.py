"""Datasets of labelled snippets, segment pooling and stratified splitting.

A *snippet* is one labelled instance made of an ordered list of segment
feature vectors.  Class labels are integers ``1..C``; the mapping to the
external names found in the CSV file lives in :attr:`Dataset.label_names`.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "Snippet",
    "Dataset",
    "SampleSet",
    "load_dataset",
    "save_dataset",
    "pool_average",
    "stratified_split",
    "stratified_kfold",
    "stratified_split_indices",
    "stratified_kfold_indices",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Snippet:
    id: str
    label: int
    segments: np.ndarray  # (n_segments, M)

    def __post_init__(self):
        seg = np.array(self.segments, dtype=np.float64)
        if seg.ndim != 2 or seg.shape[0] == 0:
            raise DataError(f"snippet {self.id!r} needs a nonempty 2-D segment array")
        if not np.all(np.isfinite(seg)):
            raise DataError(f"snippet {self.id!r} has non-finite feature values")
        object.__setattr__(self, "segments", _freeze(seg))

    @property
    def feature_dim(self) -> int:
        return self.segments.shape[1]


@dataclass(frozen=True)
class SampleSet:
    """Flat segment-level samples restricted to a label subset."""

    features: np.ndarray  # (n, M)
    labels: np.ndarray  # (n,)
    restricted_labels: tuple[int, ...]

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError("features/labels shape mismatch")
        labels = tuple(sorted(int(c) for c in self.restricted_labels))
        if y.size and not np.all(np.isin(y, labels)):
            raise DataError("sample label outside the restricted label set")
        object.__setattr__(self, "features", _freeze(X))
        object.__setattr__(self, "labels", _freeze(y))
        object.__setattr__(self, "restricted_labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def restrict(self, labels: Sequence[int]) -> "SampleSet":
        keep = np.isin(self.labels, list(labels))
        return SampleSet(self.features[keep], self.labels[keep], tuple(labels))

    def subset(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(self.features[idx], self.labels[idx], self.restricted_labels)


@dataclass(frozen=True)
class Dataset:
    snippets: tuple[Snippet, ...]
    label_names: tuple[str, ...]  # label_names[c - 1] is the external name of class c
    feature_dim: int = field(default=0)

    def __post_init__(self):
        snippets = tuple(self.snippets)
        names = tuple(str(n) for n in self.label_names)
        C = len(names)
        if not snippets:
            raise DataError("empty dataset")
        if C < 2:
            raise DataError(f"need at least 2 classes, got {C}")
        if len(set(names)) != C:
            raise DataError("duplicate class names in label map")
        M = snippets[0].feature_dim
        ids = set()
        present = set()
        for s in snippets:
            if s.feature_dim != M:
                raise DataError(
                    f"snippet {s.id!r} has dimension {s.feature_dim}, expected {M}"
                )
            if not 1 <= s.label <= C:
                raise DataError(f"snippet {s.id!r} label {s.label} outside 1..{C}")
            if s.id in ids:
                raise DataError(f"duplicate snippet id {s.id!r}")
            ids.add(s.id)
            present.add(s.label)
        missing = sorted(set(range(1, C + 1)) - present)
        if missing:
            raise DataError(f"classes without snippets: {[names[c - 1] for c in missing]}")
        object.__setattr__(self, "snippets", snippets)
        object.__setattr__(self, "label_names", names)
        object.__setattr__(self, "feature_dim", M)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def label_map(self) -> dict[str, int]:
        return {name: i + 1 for i, name in enumerate(self.label_names)}

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.snippets], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.snippets]

    def __len__(self) -> int:
        return len(self.snippets)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.snippets[i] for i in idx), self.label_names)

    def select_ids(self, ids: Sequence[str]) -> "Dataset":
        """Snippets with the given ids, in the given order."""
        by_id = {s.id: s for s in self.snippets}
        try:
            return Dataset(tuple(by_id[i] for i in ids), self.label_names)
        except KeyError as exc:
            raise DataError(f"snippet id {exc.args[0]!r} not in dataset") from None

    def segment_samples(self, labels: Sequence[int] | None = None) -> SampleSet:
        """Flatten to one sample per segment, optionally restricted to ``labels``."""
        labels = tuple(range(1, self.num_classes + 1)) if labels is None else tuple(labels)
        wanted = set(labels)
        chosen = [s for s in self.snippets if s.label in wanted]
        if not chosen:
            return SampleSet(np.empty((0, self.feature_dim)), np.empty(0, np.int64), labels)
        X = np.concatenate([s.segments for s in chosen])
        y = np.concatenate([np.full(len(s.segments), s.label) for s in chosen])
        return SampleSet(X, y, labels)


# -- CSV ingestion -----------------------------------------------------------

def load_dataset(path: str | Path, format: str = "csv") -> Dataset:
    """Read a segment-per-row CSV (``snippet_id,label,segment_index,f1..fM``)."""
    if format != "csv":
        raise DataError(f"unsupported dataset format {format!r}")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty dataset") from None
        header = [h.strip() for h in header]
        M = len(header) - 3
        expected = ["snippet_id", "label", "segment_index"] + [f"f{i}" for i in range(1, M + 1)]
        if M < 1 or header != expected:
            raise DataError(f"{path}: unknown header {','.join(header)!r}")
        rows: dict[str, list[tuple[int, np.ndarray]]] = defaultdict(list)
        snippet_label: dict[str, str] = {}
        order: list[str] = []
        name_order: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != M + 3:
                raise DataError(
                    f"{path}:{lineno}: row has {len(row) - 3} features, header declares {M}"
                )
            sid, name, seg_idx = row[0].strip(), row[1].strip(), row[2].strip()
            try:
                values = np.array([float(v) for v in row[3:]])
                seg_i = int(seg_idx)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if sid in snippet_label and snippet_label[sid] != name:
                raise DataError(f"{path}:{lineno}: snippet {sid!r} has conflicting labels")
            if sid not in snippet_label:
                snippet_label[sid] = name
                order.append(sid)
            if name not in name_order:
                name_order.append(name)
            rows[sid].append((seg_i, values))
    if not order:
        raise DataError(f"{path}: empty dataset")
    label_of = {n: i + 1 for i, n in enumerate(name_order)}
    snippets = []
    for sid in order:
        segs = sorted(rows[sid], key=lambda t: t[0])
        idx = [t[0] for t in segs]
        if len(set(idx)) != len(idx):
            raise DataError(f"{path}: snippet {sid!r} repeats a segment_index")
        snippets.append(Snippet(sid, label_of[snippet_label[sid]], np.stack([t[1] for t in segs])))
    return Dataset(tuple(snippets), tuple(name_order))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    M = dataset.feature_dim
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snippet_id", "label", "segment_index"] + [f"f{i}" for i in range(1, M + 1)])
        for s in dataset.snippets:
            name = dataset.label_names[s.label - 1]
            for j, seg in enumerate(s.segments):
                w.writerow([s.id, name, j] + [repr(float(v)) for v in seg])


def pool_average(vectors) -> np.ndarray:
    """Elementwise mean of a nonempty list of equal-length vectors."""
    if len(vectors) == 0:
        raise DataError("cannot pool an empty list of vectors")
    try:
        arr = np.asarray(vectors, dtype=np.float64)
    except ValueError:
        raise DataError("vectors to pool have mismatched dimensions") from None
    if arr.ndim != 2:
        raise DataError("vectors to pool have mismatched dimensions")
    return arr.mean(axis=0)


# -- splitting ----------------------------------------------------------------

def _class_members(labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def stratified_split_indices(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per class, ``ceil(fraction * n_c)`` indices go to the first part (capped at n_c - 1)."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"split fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    part_a, part_b = [], []
    for c, members in _class_members(labels).items():
        n = members.size
        if n < 2:
            raise DataError(f"class {c} has {n} member(s); the split needs at least 2")
        n_a = min(math.ceil(fraction * n), n - 1)
        perm = members[rng.permutation(n)]
        part_a.append(perm[:n_a])
        part_b.append(perm[n_a:])
    return np.sort(np.concatenate(part_a)), np.sort(np.concatenate(part_b))


def stratified_kfold_indices(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold over sample indices; per-class fold sizes differ by at most one."""
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c, members in _class_members(labels).items():
        n = members.size
        if n < k:
            raise DataError(f"class {c} has {n} member(s); {k}-fold needs at least {k}")
        perm = members[rng.permutation(n)]
        # rotating start keeps the overall fold sizes balanced too
        fold_of[perm] = (np.arange(n) + offset) % k
        offset = (offset + n) % k
    folds = []
    for f in range(k):
        held = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, held))
    return folds


def stratified_split(data: Dataset | SampleSet, fraction: float, seed: int):
    """Split a Dataset (by snippet) or SampleSet (by sample) into two stratified parts."""
    a, b = stratified_split_indices(data.labels, fraction, seed)
    return data.subset(a), data.subset(b)


def stratified_kfold(data: Dataset | SampleSet, k: int, seed: int):
    return [(data.subset(tr), data.subset(te)) for tr, te in stratified_kfold_indices(data.labels, k, seed)]
