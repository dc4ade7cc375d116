"""Gram and distance matrices plus the median bandwidth heuristic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAMILIES = ("gaussian", "laplacian")


@dataclass(frozen=True)
class KernelSpec:
    """family 'gaussian': exp(-||x-z||^2 / (2 scale^2)); 'laplacian': exp(-scale * ||x-z||_1)."""

    family: str
    scale: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.scale > 0:
            raise ValueError("kernel scale must be positive")


def squared_distances(X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = X if Z is None else np.atleast_2d(np.asarray(Z, dtype=float))
    xx = np.sum(X**2, axis=1)[:, None]
    zz = np.sum(Z**2, axis=1)[None, :]
    d2 = xx + zz - 2.0 * (X @ Z.T)
    return np.maximum(d2, 0.0)


def distance_matrix(X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    """Pairwise Euclidean distances; exact zero diagonal for the symmetric case."""
    d = np.sqrt(squared_distances(X, Z))
    if Z is None:
        np.fill_diagonal(d, 0.0)
        d = 0.5 * (d + d.T)
    return d


def _l1_distances(X: np.ndarray, Z: np.ndarray, block: int = 256) -> np.ndarray:
    out = np.empty((X.shape[0], Z.shape[0]))
    for start in range(0, X.shape[0], block):
        stop = min(start + block, X.shape[0])
        out[start:stop] = np.abs(X[start:stop, None, :] - Z[None, :, :]).sum(axis=2)
    return out


def gram_matrix(kernel: KernelSpec, X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    """Elementwise kernel evaluations; symmetric with unit diagonal when Z is None."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("cannot build a Gram matrix from an empty sample")
    symmetric = Z is None
    if kernel.family == "gaussian":
        K = np.exp(-squared_distances(X, Z) / (2.0 * kernel.scale**2))
    else:
        Zm = X if Z is None else np.atleast_2d(np.asarray(Z, dtype=float))
        K = np.exp(-kernel.scale * _l1_distances(X, Zm))
    if symmetric:
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
    return K


def median_heuristic(X: np.ndarray) -> float:
    """Median of the strictly positive pairwise Euclidean distances."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two rows")
    d = distance_matrix(X)
    upper = d[np.triu_indices(d.shape[0], k=1)]
    positive = upper[upper > 0.0]
    if positive.size == 0:
        raise ValueError("all rows are identical; the median distance is degenerate")
    return float(np.median(positive))
