"""Pairwise head similarity from activations or weights.

The activation metric compares two heads' projection outputs row-wise:
for each row of one head's activation matrix, take the best cosine
match among the other head's rows, sum, then symmetrize by averaging
the two directions. The weight metric is plain cosine similarity of
flattened projection tensors and exists as the cheap baseline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from gqakit.errors import InputError, ShapeError
from gqakit.numerics import cosim

METRICS = ("activation", "weight")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric n_heads x n_heads score matrix for one projection."""

    values: np.ndarray
    metric: str
    n_rows: int  # activation rows per head (0 for the weight metric)

    @property
    def n_heads(self) -> int:
        return self.values.shape[0]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {v.shape}")
        if self.metric not in METRICS:
            raise InputError(f"unknown metric {self.metric!r}")


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    out = np.divide(a, norms, out=np.zeros_like(a), where=norms > 0.0)
    return out


def activation_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric best-match cosine score between two activation matrices.

    Rows are samples, columns the projection output dimension. A row
    with zero norm contributes cosine 0 against everything.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("activation matrices must be 2-D")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"activation dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("activation matrices must have at least one row")
    c = np.clip(_normalize_rows(a) @ _normalize_rows(b).T, -1.0, 1.0)
    return 0.5 * (c.max(axis=1).sum() + c.max(axis=0).sum())


def weight_similarity(w_a: np.ndarray, w_b: np.ndarray) -> float:
    """Cosine similarity of two flattened projection tensors."""
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if w_a.shape != w_b.shape:
        raise ShapeError(f"weight shapes differ: {w_a.shape} vs {w_b.shape}")
    return cosim(w_a.ravel(), w_b.ravel())


def similarity_matrix(per_head: list[np.ndarray], metric: str) -> SimilarityMatrix:
    """Full pairwise matrix over per-head activation (or weight) tensors.

    The diagonal is computed like any other entry, not pinned; for the
    activation metric on matrices without zero rows it comes out equal
    to the row count.
    """
    if metric not in METRICS:
        raise InputError(f"unknown metric {metric!r}; expected one of {METRICS}")
    h = len(per_head)
    if h < 1:
        raise InputError("need at least one head")
    values = np.zeros((h, h))
    if metric == "activation":
        n_rows = per_head[0].shape[0]
        normed = [_normalize_rows(np.asarray(m, dtype=np.float64)) for m in per_head]
        for i in range(h):
            for j in range(i, h):
                c = np.clip(normed[i] @ normed[j].T, -1.0, 1.0)
                values[i, j] = values[j, i] = 0.5 * (
                    c.max(axis=1).sum() + c.max(axis=0).sum())
    else:
        n_rows = 0
        flat = [np.asarray(m, dtype=np.float64).ravel() for m in per_head]
        for i in range(h):
            for j in range(i, h):
                values[i, j] = values[j, i] = cosim(flat[i], flat[j])
    return SimilarityMatrix(values=values, metric=metric, n_rows=n_rows)


def save_similarity_csv(sim: SimilarityMatrix, path) -> None:
    """Write the matrix as head_i,head_j,score rows (upper triangle
    included; the matrix is symmetric)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["head_i", "head_j", "score"])
        h = sim.n_heads
        for i in range(h):
            for j in range(h):
                w.writerow([i, j, repr(float(sim.values[i, j]))])
