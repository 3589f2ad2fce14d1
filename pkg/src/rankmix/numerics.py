"""Dense float64 primitives shared by the gate, adapter and trainer.

Matrices and vectors are plain numpy arrays of dtype float64. The helpers
here validate shapes loudly; nothing is ever silently truncated or broadcast.
Row-wise variants (``*_rows``) treat each row of a 2-D array as an
independent vector and are what the batched training path uses.
"""

from __future__ import annotations

import numpy as np

from rankmix.errors import AllMasked, DimensionError, InvalidBudget

NEG_INF = -np.inf

DenseMatrix = np.ndarray
DenseVector = np.ndarray


def as_vector(x, name: str = "vector") -> DenseVector:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    return v


def as_matrix(m, name: str = "matrix") -> DenseMatrix:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} must be a 2-D array with rows, cols >= 1, got shape {a.shape}")
    return a


def matvec(m: DenseMatrix, x: DenseVector) -> DenseVector:
    m = as_matrix(m)
    x = as_vector(x)
    if m.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: matrix has {m.shape[1]} cols but vector has length {x.shape[0]}")
    return m @ x


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis; NEG_INF entries map to exactly 0."""
    z = np.asarray(z, dtype=np.float64)
    finite = np.isfinite(z)
    if not finite.any(axis=-1).all():
        raise AllMasked("softmax received a row with every entry masked")
    zmax = np.max(np.where(finite, z, -np.inf), axis=-1, keepdims=True)
    # exp(-inf) is exactly 0.0, so masked entries need no special casing here
    e = np.exp(z - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def stable_softmax(v: DenseVector) -> DenseVector:
    v = as_vector(v)
    return softmax_rows(v[None, :])[0]


def topk_mask_rows(s: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row, ties going to the lower index."""
    if k < 1:
        raise InvalidBudget(f"top-k budget must be >= 1, got {k}")
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[-1]
    if k >= n:
        return np.ones(s.shape, dtype=bool)
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(s.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_indices(v: DenseVector, k: int) -> np.ndarray:
    """Indices (ascending) of the min(k, len) largest entries of ``v``."""
    v = as_vector(v)
    return np.flatnonzero(topk_mask_rows(v[None, :], k)[0])
