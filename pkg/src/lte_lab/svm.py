"""One-vs-one kernel SVMs on precomputed Gram matrices.

Binary machines solve the soft-margin dual

    max_a  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j K_ij,
    s.t.   0 <= a_i <= C,  sum(a_i y_i) = 0

with sequential minimal optimisation, choosing the maximal KKT-violating
pair at every step.  Multi-class prediction is by pairwise voting.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .data import stratified_kfold_indices
from .errors import DataError
from .kernels import KernelSpec, chi2_distances, default_gamma

__all__ = [
    "BinarySVM",
    "OvOClassifier",
    "train_binary_svm",
    "train_ovo",
    "predict_ovo",
    "tune_hyperparameters",
    "default_grid",
    "kkt_violations",
    "duality_gap",
]

log = logging.getLogger(__name__)

TAU = 1e-12
MAX_ITER = 1_000_000


@numba.njit(cache=True, nogil=True)
def _smo(K, y, C, tol, max_iter):
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 1/2 a^T Q a - sum(a)
    it = 0
    m_up = 0.0
    m_low = 0.0
    while it < max_iter:
        # i: argmax over I_up of -y G; j: argmin over I_low of -y G
        i = -1
        j = -1
        m_up = -np.inf
        m_low = np.inf
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > m_up:
                    m_up = v
                    i = t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                if v < m_low:
                    m_low = v
                    j = t
        if i < 0 or j < 0 or m_up - m_low < tol:
            break
        it += 1

        Kii = K[i, i]
        Kjj = K[j, j]
        Kij = K[i, j]
        ai = alpha[i]
        aj = alpha[j]
        if y[i] != y[j]:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0.0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni = ai + delta
            nj = aj + delta
            if diff > 0:
                if nj < 0:
                    nj = 0.0
                    ni = diff
            else:
                if ni < 0:
                    ni = 0.0
                    nj = -diff
            if diff > 0:
                if ni > C:
                    ni = C
                    nj = C - diff
            else:
                if nj > C:
                    nj = C
                    ni = C + diff
        else:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0.0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            s = ai + aj
            ni = ai - delta
            nj = aj + delta
            if s > C:
                if ni > C:
                    ni = C
                    nj = s - C
            else:
                if nj < 0:
                    nj = 0.0
                    ni = s
            if s > C:
                if nj > C:
                    nj = C
                    ni = s - C
            else:
                if ni < 0:
                    ni = 0.0
                    nj = s
        dai = ni - ai
        daj = nj - aj
        alpha[i] = ni
        alpha[j] = nj
        for t in range(n):
            G[t] += y[t] * (y[i] * K[t, i] * dai + y[j] * K[t, j] * daj)

    # bias: mean of -y G over free vectors, else the midpoint of the bounds
    total = 0.0
    n_free = 0
    for t in range(n):
        if 0.0 < alpha[t] < C:
            total += -y[t] * G[t]
            n_free += 1
    if n_free > 0:
        b = total / n_free
    else:
        b = 0.5 * (m_up + m_low)
    return alpha, b, it, m_up - m_low


@dataclass(frozen=True, eq=False)
class BinarySVM:
    alpha: np.ndarray  # one per training sample of the pair
    y: np.ndarray  # +-1
    b: float
    C_reg: float
    classes: tuple[int, int]  # (negative class, positive class)
    iterations: int = 0
    converged: bool = True

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)

    def decision(self, K_rows: np.ndarray) -> np.ndarray:
        """Decision values from a (n_test, n_train) Gram against the pair's training samples."""
        return np.atleast_2d(K_rows) @ (self.alpha * self.y) + self.b


def train_binary_svm(K, y, C_reg: float = 1.0, tol: float = 1e-3, max_iter: int = MAX_ITER,
                     classes: tuple[int, int] = (-1, 1)) -> BinarySVM:
    K = np.ascontiguousarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] != y.shape[0]:
        raise DataError("gram must be square and match the label vector")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("binary SVM labels must be +1/-1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DataError("binary SVM needs both classes present")
    if not np.allclose(K, K.T, rtol=0, atol=1e-10 * max(1.0, np.abs(K).max())):
        raise DataError("training gram is not symmetric")
    if C_reg <= 0:
        raise DataError("C_reg must be positive")
    alpha, b, it, gap = _smo(K, y, float(C_reg), float(tol), int(max_iter))
    converged = gap < tol
    if not converged:
        log.warning("SMO stopped after %d updates with KKT gap %.3g > tol %.3g", it, gap, tol)
    return BinarySVM(alpha, y, float(b), float(C_reg), tuple(classes), int(it), bool(converged))


def kkt_violations(svm: BinarySVM, K) -> np.ndarray:
    """Per-sample KKT violation of a trained machine (0 where satisfied)."""
    f = np.asarray(K) @ (svm.alpha * svm.y) + svm.b
    m = svm.y * f
    C = svm.C_reg
    at_zero = svm.alpha <= 0
    at_c = svm.alpha >= C
    free = ~at_zero & ~at_c
    v = np.zeros_like(m)
    v[at_zero] = np.maximum(0.0, 1.0 - m[at_zero])
    v[free] = np.abs(m[free] - 1.0)
    v[at_c] = np.maximum(0.0, m[at_c] - 1.0)
    return v


def duality_gap(svm: BinarySVM, K) -> float:
    K = np.asarray(K)
    ay = svm.alpha * svm.y
    quad = float(ay @ K @ ay)
    f = K @ ay + svm.b
    hinge = np.maximum(0.0, 1.0 - svm.y * f).sum()
    primal = 0.5 * quad + svm.C_reg * hinge
    dual = svm.alpha.sum() - 0.5 * quad
    return float(primal - dual)


# -- one-vs-one ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PairMachine:
    svm: BinarySVM
    columns: np.ndarray  # gram columns (training samples) the machine uses


@dataclass(eq=False)
class OvOClassifier:
    classes: tuple[int, ...]
    machines: list[PairMachine]
    kernel: KernelSpec | None = None
    col_ids: list[str] | None = None  # identity of gram columns, if known
    n_columns: int = 0

    def pair_index(self) -> dict[tuple[int, int], PairMachine]:
        return {m.svm.classes: m for m in self.machines}

    def compact(self) -> tuple["OvOClassifier", np.ndarray]:
        """Keep only support columns.  Returns the classifier and the kept column indices."""
        keep = np.unique(np.concatenate([m.columns[m.svm.support] for m in self.machines]))
        remap = {int(c): i for i, c in enumerate(keep)}
        machines = []
        for m in self.machines:
            s = m.svm.support
            svm = BinarySVM(m.svm.alpha[s], m.svm.y[s], m.svm.b, m.svm.C_reg, m.svm.classes,
                            m.svm.iterations, m.svm.converged)
            machines.append(PairMachine(svm, np.array([remap[int(c)] for c in m.columns[s]], dtype=np.int64)))
        ids = [self.col_ids[i] for i in keep] if self.col_ids is not None else None
        return OvOClassifier(self.classes, machines, self.kernel, ids, keep.size), keep

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "kernel": self.kernel.to_dict() if self.kernel else None,
            "col_ids": self.col_ids,
            "n_columns": self.n_columns,
            "machines": [
                {"classes": list(m.svm.classes), "columns": m.columns.tolist(),
                 "alpha": m.svm.alpha.tolist(), "y": m.svm.y.tolist(), "b": m.svm.b,
                 "C_reg": m.svm.C_reg, "iterations": m.svm.iterations,
                 "converged": m.svm.converged}
                for m in self.machines
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OvOClassifier":
        machines = [
            PairMachine(BinarySVM(np.asarray(m["alpha"]), np.asarray(m["y"]), m["b"], m["C_reg"],
                                  tuple(m["classes"]), m["iterations"], m["converged"]),
                        np.asarray(m["columns"], dtype=np.int64))
            for m in d["machines"]
        ]
        kernel = KernelSpec.from_dict(d["kernel"]) if d.get("kernel") else None
        return cls(tuple(d["classes"]), machines, kernel, d.get("col_ids"), d["n_columns"])


def train_ovo(K, labels, C_reg: float = 1.0, tol: float = 1e-3, kernel: KernelSpec | None = None,
              col_ids: Sequence[str] | None = None, max_iter: int = MAX_ITER) -> OvOClassifier:
    """One binary machine per unordered class pair on the pair's Gram submatrix."""
    K = np.asarray(K, dtype=np.float64)
    labels = np.asarray(labels)
    classes = tuple(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise DataError("one-vs-one training needs at least two classes")
    machines = []
    for a, b in itertools.combinations(classes, 2):
        cols = np.flatnonzero((labels == a) | (labels == b))
        y = np.where(labels[cols] == b, 1.0, -1.0)
        svm = train_binary_svm(K[np.ix_(cols, cols)], y, C_reg, tol, max_iter, classes=(a, b))
        machines.append(PairMachine(svm, cols))
    return OvOClassifier(classes, machines, kernel, list(col_ids) if col_ids is not None else None,
                         K.shape[1])


def predict_ovo(clf: OvOClassifier, K_rows) -> np.ndarray:
    """Pairwise voting; ties go to the larger summed |decision|, then the smaller class."""
    K_rows = np.atleast_2d(np.asarray(K_rows, dtype=np.float64))
    if K_rows.shape[1] != clf.n_columns:
        raise DataError(f"gram has {K_rows.shape[1]} columns, classifier expects {clf.n_columns}")
    n = K_rows.shape[0]
    pos = {c: i for i, c in enumerate(clf.classes)}
    votes = np.zeros((n, len(clf.classes)))
    strength = np.zeros((n, len(clf.classes)))
    # sort machines by class pair so the accumulation order is storage independent
    for m in sorted(clf.machines, key=lambda m: m.svm.classes):
        f = m.svm.decision(K_rows[:, m.columns])
        a, b = m.svm.classes
        win = np.where(f > 0, pos[b], pos[a])
        votes[np.arange(n), win] += 1
        strength[np.arange(n), win] += np.abs(f)
    out = np.empty(n, dtype=np.int64)
    cls = np.asarray(clf.classes)
    for r in range(n):
        top = np.flatnonzero(votes[r] == votes[r].max())
        if top.size > 1:
            s = strength[r, top]
            top = top[s == s.max()]
        out[r] = cls[top].min()
    return out


# -- model selection -----------------------------------------------------------------

def default_grid(kind: str, c_grid=(0.1, 1.0, 10.0, 100.0),
                 gamma_scales=(0.25, 0.5, 1.0, 2.0, 4.0)) -> list[dict]:
    if kind == "rbf":
        return [{"C_reg": c, "gamma_scale": g} for c in c_grid for g in gamma_scales]
    return [{"C_reg": c} for c in c_grid]


@dataclass
class _Precomputed:
    """Full-train base matrices; fold kernels are sliced from these."""

    kind: str
    channels: list[np.ndarray]
    base: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        X = self.channels
        if self.kind == "linear":
            self.base = [X[0] @ X[0].T]
        elif self.kind == "hist":
            from .kernels import gram
            self.base = [gram("hist", X[0])]
        elif self.kind in ("chi2", "fusion"):
            self.base = [chi2_distances(c) for c in X]
        elif self.kind == "rbf":
            sq = (X[0] ** 2).sum(1)
            D = sq[:, None] + sq[None, :] - 2 * X[0] @ X[0].T
            np.fill_diagonal(D, 0.0)
            self.base = [np.maximum(D, 0.0)]
        else:
            raise DataError(f"unknown kernel {self.kind!r}")

    def spec(self, train_idx: np.ndarray, point: dict) -> KernelSpec:
        if self.kind == "rbf":
            return KernelSpec("rbf", gamma=default_gamma(self.channels[0][train_idx]) * point.get("gamma_scale", 1.0))
        if self.kind in ("chi2", "fusion"):
            iu = np.triu_indices(train_idx.size, k=1)
            md = []
            for D in self.base:
                sub = D[np.ix_(train_idx, train_idx)]
                md.append(float(sub[iu].mean()))
            return KernelSpec(self.kind, mean_distances=tuple(md))
        return KernelSpec(self.kind)

    def block(self, spec: KernelSpec, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        if self.kind in ("linear", "hist"):
            return self.base[0][np.ix_(rows, cols)]
        if self.kind == "rbf":
            return np.exp(-spec.gamma * self.base[0][np.ix_(rows, cols)])
        total = np.zeros((rows.size, cols.size))
        for D, d in zip(self.base, spec.mean_distances):
            total += D[np.ix_(rows, cols)] / d
        return np.exp(-total)


def tune_hyperparameters(channels, labels, kind: str, grid: Sequence[dict] | None = None,
                         k: int = 10, seed: int = 0, tol: float = 1e-3) -> tuple[dict, list[dict]]:
    """Grid search by stratified k-fold accuracy.

    ``channels`` is one training embedding array or a list of them (fusion).
    Returns the best grid point and the score table (one row per point).
    The best point has the highest mean accuracy; ties go to the smallest
    ``C_reg`` and then to grid order.
    """
    chans = [np.atleast_2d(np.asarray(channels, dtype=np.float64))] if isinstance(channels, np.ndarray) \
        else [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in channels]
    labels = np.asarray(labels)
    grid = list(grid) if grid is not None else default_grid(kind)
    if not grid:
        raise DataError("hyperparameter grid is empty")
    pre = _Precomputed(kind, chans)
    folds = stratified_kfold_indices(labels, k, seed)
    specs = {}
    table = []
    for gi, point in enumerate(grid):
        accs = []
        for fi, (tr, te) in enumerate(folds):
            key = (fi, point.get("gamma_scale", 1.0))
            if key not in specs:
                specs[key] = pre.spec(tr, point)
            spec = specs[key]
            clf = train_ovo(pre.block(spec, tr, tr), labels[tr], point["C_reg"], tol, spec)
            pred = predict_ovo(clf, pre.block(spec, te, tr))
            accs.append(float(np.mean(pred == labels[te])))
        table.append({"index": gi, **point, "fold_accuracy": accs, "mean_accuracy": float(np.mean(accs))})
    best = max(table, key=lambda r: (r["mean_accuracy"], -r["C_reg"], -r["index"]))
    return {k_: v for k_, v in best.items() if k_ in grid[best["index"]]}, table
