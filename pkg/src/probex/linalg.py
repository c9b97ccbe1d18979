"""Dense numeric kernels used throughout the package.

Matrices and 3D tensors are plain ``numpy`` arrays in double precision;
single precision is only used when writing files (see :mod:`probex.tensorio`).
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DegenerateInputError, DimensionError

__all__ = [
    "as_matrix",
    "matmul",
    "contract3",
    "relu",
    "relu_grad",
    "cosine_sim",
    "quantile",
    "pairwise_l2",
    "make_rng",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def contract3(w, x) -> np.ndarray:
    """Return ``y[k] = sum_ij w[i, j, k] * x[i, j]``."""
    w = np.asarray(w, dtype=np.float64)
    x = as_matrix(x, "x")
    if w.ndim != 3:
        raise DimensionError(f"w must be 3-D, got shape {w.shape}")
    if w.shape[:2] != x.shape:
        raise DimensionError(f"tensor {w.shape} does not contract with matrix {x.shape}")
    return x.reshape(-1) @ w.reshape(-1, w.shape[2])


def relu(v) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def relu_grad(v) -> np.ndarray:
    # subgradient at 0 is taken as 0
    return (np.asarray(v) > 0).astype(np.float64)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
    return float(a @ b / (na * nb))


def quantile(v, q: float) -> float:
    """Quantile with linear interpolation between order statistics (type 7)."""
    s = np.sort(np.asarray(v, dtype=np.float64).ravel())
    if s.size == 0:
        raise DegenerateInputError("quantile of an empty vector")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return _sorted_quantile(s, q)


def _sorted_quantile(s: np.ndarray, q: float) -> float:
    h = (s.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, s.size - 1)
    frac = h - lo
    if frac == 0.0:
        return float(s[lo])
    return float(s[lo] + frac * (s[hi] - s[lo]))


def pairwise_l2(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Frobenius distances between every pair of equally shaped arrays."""
    if len(rows) == 0:
        return np.zeros((0, 0))
    shape = np.shape(rows[0])
    for r in rows:
        if np.shape(r) != shape:
            raise DimensionError(f"pairwise_l2 needs equal shapes, got {shape} and {np.shape(r)}")
    flat = np.stack([np.asarray(r, dtype=np.float64).ravel() for r in rows])
    if len(rows) == 1:
        return np.zeros((1, 1))
    # squareform mirrors the condensed vector, so symmetry and the zero diagonal are exact
    return squareform(pdist(flat, metric="euclidean"))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``seed``, split into an independent stream per key path.

    ``make_rng(7, 3)`` and ``make_rng(7, 4)`` are statistically independent and
    both fully determined by their arguments.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))
