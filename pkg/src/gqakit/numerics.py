"""Dense linear-algebra helpers and the deterministic RNG.

Matrices throughout the package are plain 2-D float64 numpy arrays in
row-major (C) order; numpy's BLAS-backed kernels do the heavy lifting.
This module adds the shape/validity checking the rest of the toolkit
relies on, plus a seeded RNG whose draw sequence is stable across runs
and platforms (PCG64).
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

from gqakit.errors import InputError, ShapeError


def matrix(data) -> np.ndarray:
    """Coerce to a 2-D float64 array, validating finiteness."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("matrix contains non-finite entries")
    return np.ascontiguousarray(m)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit dimension checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise InputError("matmul produced non-finite entries")
    return out


def cosim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors.

    Returns 0.0 when either vector has zero norm: a dead head carries no
    similarity signal, and this keeps downstream scores finite.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    val = float(np.dot(u, v) / (nu * nv))
    # rounding can push |val| marginally past 1
    return min(1.0, max(-1.0, val))


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def topk_excluding(scores: Sequence[float], k: int, excluded: Iterable[int]) -> list[int]:
    """Indices of the k largest scores outside `excluded`.

    Sorted by descending score; ties broken by ascending index so results
    are deterministic. Returns fewer than k indices when fewer candidates
    exist.
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    excluded = set(excluded)
    candidates = [i for i in range(scores.shape[0]) if i not in excluded]
    if not candidates:
        raise InputError("all indices excluded, no top-k candidates")
    candidates.sort(key=lambda i: (-scores[i], i))
    return candidates[:k]


class Rng:
    """Deterministic random stream (PCG64) with derivable substreams.

    Identical seeds produce identical draw sequences across runs and
    platforms. Instances are single-owner: never share one across
    concurrent callers.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self) -> float:
        """One draw from Uniform[0, 1)."""
        return float(self._gen.random())

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self._gen.integers(0, n))

    def randint_array(self, n: int, size) -> np.ndarray:
        """Uniform integers in [0, n) as an int64 array."""
        return self._gen.integers(0, n, size=size, dtype=np.int64)

    def choice(self, seq):
        """Uniform pick from a non-empty sequence."""
        if len(seq) == 0:
            raise InputError("cannot choose from an empty sequence")
        return seq[self.randint(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def derive(self, *tags) -> "Rng":
        """A child stream keyed by (seed, tags); stable across platforms."""
        return Rng(derive_seed(self.seed, *tags))


def derive_seed(seed: int, *tags) -> int:
    """Hash a base seed and string/int tags into a fresh 64-bit seed."""
    label = "/".join([str(int(seed) & 0xFFFFFFFFFFFFFFFF)] + [str(t) for t in tags])
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
