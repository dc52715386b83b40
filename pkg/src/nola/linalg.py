"""Small dense-matrix kernel on float64 numpy arrays.

Products go through numpy/BLAS (deterministic for a fixed shape and thread
count); the functions here add the shape checks and the two operations
numpy does not provide directly: near-square reshaping and numerical rank
of a stack of samples.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DomainError

DEFAULT_RANK_TOL = 1e-9


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(x, y) -> np.ndarray:
    x, y = as_matrix(x), as_matrix(y)
    if x.shape[1] != y.shape[0]:
        raise DomainError(f"cannot multiply {x.shape} by {y.shape}")
    return x @ y


def frobenius_inner(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.dot(x.ravel(), y.ravel()))


def reshape_near_square(dims: Sequence[int]) -> tuple[int, int]:
    """Divisor pair ``(m, n)`` of ``prod(dims)`` with ``m <= n`` and ``n - m`` minimal."""
    total = math.prod(int(d) for d in dims)
    if total < 1:
        raise DomainError(f"tensor shape {tuple(dims)} has no elements")
    m = math.isqrt(total)
    while total % m:
        m -= 1
    return m, total // m


def singular_values(x) -> np.ndarray:
    return np.linalg.svd(as_matrix(x), compute_uv=False)


def numerical_rank(samples, tol_rel: float = DEFAULT_RANK_TOL) -> int:
    """Rank of the span of the vectorized samples.

    Each sample is flattened row-major into one row of an ``N x size``
    matrix; singular values above ``tol_rel * s_max * max(N, size)`` count.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise DomainError("numerical_rank needs at least one sample")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise DomainError("all samples must share one shape")
    stacked = np.stack([s.ravel() for s in samples])
    sv = singular_values(stacked)
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > tol_rel * sv[0] * max(stacked.shape)))
