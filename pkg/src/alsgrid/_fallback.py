"""Pure numpy versions of the hot kernels.

Selected automatically when the compiled ``_core`` extension is missing.
Accumulation is strictly sequential over each row's columns (``cumsum``
rather than ``sum``, whose order numpy does not fix), so results are
bit-identical to the compiled kernels and independent of the tile width.
"""

import numpy as np


def hermitian_rows(row_ptr, col_idx, values, factor, col_offset, lam, bin,
                   row_start, row_stop, a_out, b_out):
    acc_dtype = a_out.dtype
    f = factor.shape[1]
    diag = np.arange(f)
    for u in range(row_start, row_stop):
        lo, hi = int(row_ptr[u]), int(row_ptr[u + 1])
        acc = np.zeros((f, f), dtype=acc_dtype)
        bacc = np.zeros(f, dtype=acc_dtype)
        for s in range(lo, hi, bin):
            e = min(s + bin, hi)
            tile = factor[col_idx[s:e].astype(np.int64) - col_offset].astype(acc_dtype)
            r = values[s:e].astype(acc_dtype)
            outer = tile[:, :, None] * tile[:, None, :]
            acc = np.cumsum(np.concatenate((acc[None], outer)), axis=0)[-1]
            bacc = np.cumsum(np.concatenate((bacc[None], r[:, None] * tile)), axis=0)[-1]
        k = u - row_start
        acc[diag, diag] += acc_dtype.type((hi - lo) * lam)
        a_out[k] = acc
        b_out[k] = bacc


def solve_rows(a, b, x_out, start, stop):
    """Cholesky-solve entries ``start:stop``; returns the first failing
    index or -1. Entries whose diagonal is all zero are set to zero."""
    f = a.shape[1]
    L = a[start:stop].astype(np.float64)
    y = b[start:stop].astype(np.float64)
    empty = np.all(np.diagonal(L, axis1=1, axis2=2) == 0.0, axis=1)
    L[empty] = np.eye(f)
    y[empty] = 0.0
    for j in range(f):
        d = L[:, j, j] - np.einsum("bk,bk->b", L[:, j, :j], L[:, j, :j])
        bad = ~(d > 0.0)
        if bad.any():
            return start + int(np.flatnonzero(bad)[0])
        L[:, j, j] = np.sqrt(d)
        if j + 1 < f:
            L[:, j + 1:, j] = (
                L[:, j + 1:, j] - np.einsum("bik,bk->bi", L[:, j + 1:, :j], L[:, j, :j])
            ) / L[:, j, j][:, None]
    for j in range(f):
        y[:, j] = (y[:, j] - np.einsum("bk,bk->b", L[:, j, :j], y[:, :j])) / L[:, j, j]
    for j in range(f - 1, -1, -1):
        y[:, j] = (y[:, j] - np.einsum("bk,bk->b", L[:, j + 1:, j], y[:, j + 1:])) / L[:, j, j]
    x_out[start:stop] = y
    return -1
