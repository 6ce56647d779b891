# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: tiled Hermitian assembly and batched Cholesky solves.

Both release the GIL so a thread pool can run disjoint row ranges
concurrently. Arithmetic order matches ``_fallback`` exactly.
"""

from cython cimport floating
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free
from libc.string cimport memset

import numpy as np


cdef void _hermitian(const long long[::1] row_ptr, const int[::1] col_idx,
                     const float[::1] values, const float[:, ::1] factor,
                     long long col_offset, double lam, Py_ssize_t bin,
                     Py_ssize_t row_start, Py_ssize_t row_stop,
                     floating[:, :, ::1] a_out, floating[:, ::1] b_out,
                     floating* tile, floating* rtile,
                     floating* acc, floating* bacc) noexcept nogil:
    cdef Py_ssize_t f = factor.shape[1]
    cdef Py_ssize_t u, s, e, t, i, j, k, lo, hi, v
    cdef floating ti, reg
    for u in range(row_start, row_stop):
        lo = row_ptr[u]
        hi = row_ptr[u + 1]
        memset(acc, 0, f * f * sizeof(floating))
        memset(bacc, 0, f * sizeof(floating))
        s = lo
        while s < hi:
            e = s + bin
            if e > hi:
                e = hi
            # gather the next tile of factor rows into contiguous storage
            for t in range(e - s):
                v = col_idx[s + t] - col_offset
                rtile[t] = <floating>values[s + t]
                for i in range(f):
                    tile[t * f + i] = <floating>factor[v, i]
            for t in range(e - s):
                for i in range(f):
                    ti = tile[t * f + i]
                    for j in range(i + 1):
                        acc[i * f + j] += ti * tile[t * f + j]
                    bacc[i] += rtile[t] * ti
            s = e
        k = u - row_start
        reg = <floating>((hi - lo) * lam)
        for i in range(f):
            acc[i * f + i] += reg
            for j in range(i + 1):
                a_out[k, i, j] = acc[i * f + j]
                a_out[k, j, i] = acc[i * f + j]
            b_out[k, i] = bacc[i]


def hermitian_rows(const long long[::1] row_ptr, const int[::1] col_idx,
                   const float[::1] values, const float[:, ::1] factor,
                   long long col_offset, double lam, Py_ssize_t bin,
                   Py_ssize_t row_start, Py_ssize_t row_stop,
                   floating[:, :, ::1] a_out, floating[:, ::1] b_out):
    cdef Py_ssize_t f = factor.shape[1]
    cdef floating* tile = <floating*>malloc(bin * f * sizeof(floating))
    cdef floating* rtile = <floating*>malloc(bin * sizeof(floating))
    cdef floating* acc = <floating*>malloc(f * f * sizeof(floating))
    cdef floating* bacc = <floating*>malloc(f * sizeof(floating))
    if tile == NULL or rtile == NULL or acc == NULL or bacc == NULL:
        free(tile); free(rtile); free(acc); free(bacc)
        raise MemoryError()
    try:
        with nogil:
            _hermitian(row_ptr, col_idx, values, factor, col_offset, lam, bin,
                       row_start, row_stop, a_out, b_out, tile, rtile, acc, bacc)
    finally:
        free(tile); free(rtile); free(acc); free(bacc)


cdef Py_ssize_t _solve(floating[:, :, ::1] a, floating[:, ::1] b, float[:, ::1] x_out,
                       Py_ssize_t start, Py_ssize_t stop, double* L, double* y) noexcept nogil:
    cdef Py_ssize_t f = a.shape[1]
    cdef Py_ssize_t u, i, j, k
    cdef double d
    cdef bint empty
    for u in range(start, stop):
        empty = True
        for i in range(f):
            if a[u, i, i] != 0:
                empty = False
                break
        if empty:
            for i in range(f):
                x_out[u, i] = 0
            continue
        for i in range(f):
            for j in range(i + 1):
                L[i * f + j] = a[u, i, j]
            y[i] = b[u, i]
        for j in range(f):
            d = L[j * f + j]
            for k in range(j):
                d = d - L[j * f + k] * L[j * f + k]
            if not (d > 0.0):
                return u
            L[j * f + j] = sqrt(d)
            for i in range(j + 1, f):
                d = L[i * f + j]
                for k in range(j):
                    d = d - L[i * f + k] * L[j * f + k]
                L[i * f + j] = d / L[j * f + j]
        for j in range(f):
            d = y[j]
            for k in range(j):
                d = d - L[j * f + k] * y[k]
            y[j] = d / L[j * f + j]
        for j in range(f - 1, -1, -1):
            d = y[j]
            for k in range(j + 1, f):
                d = d - L[k * f + j] * y[k]
            y[j] = d / L[j * f + j]
        for i in range(f):
            x_out[u, i] = <float>y[i]
    return -1


def solve_rows(floating[:, :, ::1] a, floating[:, ::1] b, float[:, ::1] x_out,
               Py_ssize_t start, Py_ssize_t stop):
    cdef Py_ssize_t f = a.shape[1]
    cdef Py_ssize_t bad
    cdef double* L = <double*>malloc(f * f * sizeof(double))
    cdef double* y = <double*>malloc(f * sizeof(double))
    if L == NULL or y == NULL:
        free(L); free(y)
        raise MemoryError()
    try:
        with nogil:
            bad = _solve(a, b, x_out, start, stop, L, y)
    finally:
        free(L); free(y)
    return bad
