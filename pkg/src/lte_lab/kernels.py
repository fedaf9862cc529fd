"""Kernel functions over embedded instances.

All kernels are evaluated as explicit Gram matrices.  The chi-square
distance follows the half convention ``0.5 * sum (u - v)^2 / (u + v)`` with
``0/0`` terms read as zero.  The ``chi2`` kernel is ``exp(-D / mean_D)`` and
the fusion kernel multiplies it across channels, each channel normalised by
its own mean training distance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericalError

__all__ = [
    "KERNELS",
    "KernelSpec",
    "ChannelSet",
    "chi2_distance",
    "chi2_distances",
    "mean_chi2",
    "fit_kernel",
    "gram",
    "fusion_gram",
    "save_gram",
]

KERNELS = ("linear", "chi2", "hist", "rbf", "fusion")


def _nonneg(X: np.ndarray, what: str) -> None:
    if np.any(X < 0):
        raise DataError(f"{what} requires nonnegative inputs")


def chi2_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DataError(f"length mismatch: {u.shape} vs {v.shape}")
    _nonneg(u, "chi2 distance")
    _nonneg(v, "chi2 distance")
    s = u + v
    nz = s > 0
    return float(0.5 * np.sum((u[nz] - v[nz]) ** 2 / s[nz]))


def chi2_distances(X, Y=None, block: int = 64) -> np.ndarray:
    """Pairwise chi-square distance matrix between rows of X and rows of Y."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise DataError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    _nonneg(X, "chi2 distance")
    _nonneg(Y, "chi2 distance")
    D = np.empty((X.shape[0], Y.shape[0]))
    for a in range(0, X.shape[0], block):
        xa = X[a:a + block, None, :]
        s = xa + Y[None, :, :]
        diff2 = (xa - Y[None, :, :]) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(s > 0, diff2 / np.where(s > 0, s, 1.0), 0.0)
        D[a:a + block] = 0.5 * terms.sum(axis=2)
    return D


def _mean_offdiag(D: np.ndarray) -> float:
    n = D.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(D[iu].mean())


def mean_chi2(X) -> float:
    """Mean chi-square distance over all unordered pairs of distinct rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 2:
        raise DataError("mean chi2 distance needs at least 2 rows")
    m = _mean_offdiag(chi2_distances(X))
    if m <= 0:
        raise NumericalError("mean chi2 distance is zero (all rows identical)")
    return m


@dataclass(frozen=True)
class KernelSpec:
    """Kernel kind plus the parameters fitted on the training rows."""

    kind: str
    gamma: float | None = None  # rbf
    mean_distances: tuple[float, ...] = field(default=())  # chi2 / fusion, one per channel

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise DataError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        object.__setattr__(self, "mean_distances", tuple(float(d) for d in self.mean_distances))
        if self.kind in ("chi2", "fusion"):
            if not self.mean_distances or min(self.mean_distances) <= 0:
                raise DataError(f"{self.kind} kernel needs positive mean distances")
        if self.kind == "rbf" and not (self.gamma and self.gamma > 0):
            raise DataError("rbf kernel needs gamma > 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "mean_distances": list(self.mean_distances)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kind"], d.get("gamma"), tuple(d.get("mean_distances", ())))


def default_gamma(X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    var = float(X.var(axis=0).mean())
    if var <= 0:
        raise NumericalError("rbf gamma undefined: training features have zero variance")
    return 1.0 / (X.shape[1] * var)


def _channels(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray):
        return [np.atleast_2d(X.astype(np.float64))]
    return [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in X]


def _single(X, kind: str) -> np.ndarray:
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], np.ndarray) and X[0].ndim == 2:
        if len(X) != 1:
            raise DataError(f"{kind} kernel takes exactly one channel, got {len(X)}")
        X = X[0]
    return np.atleast_2d(np.asarray(X, dtype=np.float64))


def fit_kernel(kind: str, train, gamma: float | None = None, gamma_scale: float = 1.0,
               mean_distances: Sequence[float] | None = None) -> KernelSpec:
    """Fit data-dependent kernel parameters on the training rows.

    ``train`` is one array, or a list of per-channel arrays for ``fusion``.
    """
    chans = _channels(train) if kind == "fusion" else [_single(train, kind)]
    if kind == "rbf":
        g = gamma if gamma is not None else default_gamma(chans[0])
        return KernelSpec("rbf", gamma=float(g * gamma_scale))
    if kind in ("chi2", "fusion"):
        md = mean_distances if mean_distances is not None else [mean_chi2(c) for c in chans]
        return KernelSpec(kind, mean_distances=tuple(md))
    return KernelSpec(kind)


def gram(kind: str | KernelSpec, X, Y=None, params: dict | None = None) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(X_i, Y_j)``.

    With a plain kind string, data-dependent parameters (rbf gamma, the chi2
    mean distance) are fitted on ``X``, which is then taken to be the
    training rows.  Pass a :class:`KernelSpec` to reuse fitted parameters.
    """
    spec = kind if isinstance(kind, KernelSpec) else fit_kernel(kind, X, **(params or {}))
    if spec.kind == "fusion":
        Xc = _channels(X)
        Yc = Xc if Y is None else _channels(Y)
        return fusion_gram(Xc, Yc, spec.mean_distances)
    same = Y is None
    X = _single(X, spec.kind)
    Y = X if same else _single(Y, spec.kind)
    if X.shape[1] != Y.shape[1]:
        raise DataError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "linear":
        return X @ Y.T
    if spec.kind == "hist":
        _nonneg(X, "hist kernel")
        _nonneg(Y, "hist kernel")
        K = np.empty((X.shape[0], Y.shape[0]))
        for a in range(0, X.shape[0], 64):
            K[a:a + 64] = np.minimum(X[a:a + 64, None, :], Y[None, :, :]).sum(axis=2)
        return K
    if spec.kind == "rbf":
        sq = (X**2).sum(1)[:, None] + (Y**2).sum(1)[None, :] - 2.0 * X @ Y.T
        if same:
            np.fill_diagonal(sq, 0.0)
        return np.exp(-spec.gamma * np.maximum(sq, 0.0))
    # chi2
    return np.exp(-chi2_distances(X, Y) / spec.mean_distances[0])


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """Training embeddings of several channels plus their mean chi2 distances."""

    channels: tuple[np.ndarray, ...]
    normalizers: tuple[float, ...]

    def __post_init__(self):
        chans = tuple(np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.channels)
        if not chans:
            raise DataError("channel set is empty")
        if len({c.shape[0] for c in chans}) != 1:
            raise DataError("channels disagree on the number of samples")
        if len(self.normalizers) != len(chans) or min(self.normalizers) <= 0:
            raise DataError("need one positive normalizer per channel")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "normalizers", tuple(float(d) for d in self.normalizers))

    @classmethod
    def from_training(cls, channels) -> "ChannelSet":
        chans = _channels(channels)
        return cls(tuple(chans), tuple(mean_chi2(c) for c in chans))


def fusion_gram(rows: Sequence[np.ndarray] | ChannelSet, cols: Sequence[np.ndarray] | None = None,
                normalizers: Sequence[float] | None = None) -> np.ndarray:
    """``exp(-sum_k D_k(x_i, x_j) / normalizer_k)`` over channels k."""
    if isinstance(rows, ChannelSet):
        normalizers = rows.normalizers if normalizers is None else normalizers
        rows = rows.channels
    rows = _channels(rows)
    cols = rows if cols is None else _channels(cols)
    if normalizers is None:
        raise DataError("fusion gram needs per-channel normalizers")
    if not (len(rows) == len(cols) == len(normalizers)):
        raise DataError("missing channel data for the fusion kernel")
    if min(normalizers) <= 0:
        raise DataError("fusion normalizers must be positive")
    total = np.zeros((rows[0].shape[0], cols[0].shape[0]))
    for R, Cc, d in zip(rows, cols, normalizers):
        total += chi2_distances(R, Cc) / d
    return np.exp(-total)


def save_gram(path: str | Path, K: np.ndarray, row_ids: Sequence[str], col_ids: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(col_ids))
        for rid, row in zip(row_ids, K):
            w.writerow([rid] + [repr(float(v)) for v in row])
