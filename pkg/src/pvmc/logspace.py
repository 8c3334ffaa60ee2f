"""Log-domain arithmetic.

Every probability or density magnitude in the package is carried as its
natural logarithm, with ``-inf`` standing for zero. Long state-space
horizons multiply hundreds of densities together, which underflows in
the linear domain long before the smoothing weights are useful.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf

# Linear-domain sums below this are recomputed with an exact log-sum-exp.
_UNDERFLOW_GUARD = 1e-250


def log_sum_exp(values, axis=None):
    """Stable ``log(sum(exp(values)))``.

    Reduces over ``axis`` (all entries when ``None``). A slice whose
    entries are all ``-inf`` reduces to ``-inf`` without ever evaluating
    ``-inf - (-inf)``.
    """
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("log_sum_exp of an empty sequence is undefined")
    if np.any(np.isnan(a)) or np.any(a == np.inf):
        raise ValueError("log_sum_exp received NaN or +inf")
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(values, axis=None):
    """``log(mean(exp(values)))``; averaging N equal entries returns that entry exactly."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("log_mean_exp of an empty sequence is undefined")
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_identity(n: int) -> np.ndarray:
    """Log of the ``n x n`` identity: zeros on the diagonal, ``-inf`` elsewhere."""
    out = np.full((n, n), NEG_INF)
    np.fill_diagonal(out, 0.0)
    return out


def log_matmul(A, B) -> np.ndarray:
    """Matrix product of two log-domain matrices.

    ``C[i, j] = log sum_l exp(A[i, l] + B[l, j])``.

    Rows of ``A`` and columns of ``B`` are max-shifted before a linear
    domain product. Entries whose shifted sum lands near the underflow
    threshold (the row and column maxima sit on different inner indices)
    are recomputed with a full three-index log-sum-exp.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("log_matmul expects 2-D arrays")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"inner dimensions differ: {A.shape} x {B.shape}")

    row_max = A.max(axis=1, keepdims=True)
    col_max = B.max(axis=0, keepdims=True)
    row_shift = np.where(np.isfinite(row_max), row_max, 0.0)
    col_shift = np.where(np.isfinite(col_max), col_max, 0.0)
    S = np.exp(A - row_shift) @ np.exp(B - col_shift)
    with np.errstate(divide="ignore"):
        C = np.log(S) + row_shift + col_shift

    suspect = S < _UNDERFLOW_GUARD
    # an all -inf row or column is a genuine zero
    suspect &= np.isfinite(row_max) & np.isfinite(col_max)
    if np.any(suspect):
        rows, cols = np.nonzero(suspect)
        C[rows, cols] = log_sum_exp(A[rows, :] + B[:, cols].T, axis=1)
    return C
