"""Compressed sparse rating matrices and the grid partitioning used by the
multi-worker update.

Offsets are 64-bit so a matrix may hold more than 2**31 ratings; row and
column indices are 32-bit, ratings are single precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

INDEX_LIMIT = 2**31 - 1

OFFSET_DTYPE = np.int64
INDEX_DTYPE = np.int32
VALUE_DTYPE = np.float32


def even_cuts(total, parts):
    """Boundaries of ``parts`` contiguous ranges covering ``range(total)``.

    The first ``total % parts`` ranges get one extra element, so sizes
    differ by at most one.
    """
    if parts < 1:
        raise InputError(f"partition count must be >= 1, got {parts}")
    base, extra = divmod(total, parts)
    sizes = np.full(parts, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate(([0], np.cumsum(sizes))).astype(np.int64)


def _check_dims(m, n):
    if m < 0 or n < 0:
        raise InputError(f"negative dimensions {m}x{n}")
    if m > INDEX_LIMIT or n > INDEX_LIMIT:
        raise InputError(f"dimensions {m}x{n} exceed the 32-bit index domain")


@dataclass(frozen=True, eq=False)
class Triplets:
    """Parallel ``(rows, cols, values)`` arrays; iterates as tuples."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        for r, c, v in zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()):
            yield (r, c, v)

    def as_set(self):
        return set(self)


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Row-compressed sparse matrix.

    Grid blocks keep global column indices; ``row_offset`` and
    ``col_offset`` locate the block inside its parent and ``col_span`` is
    the width of its column range.
    """

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    row_offset: int = 0
    col_offset: int = 0
    col_span: int | None = None

    @property
    def nnz(self):
        return int(self.row_ptr[-1])

    @property
    def shape(self):
        return (self.rows, self.cols)

    def row_counts(self):
        return np.diff(self.row_ptr)

    def row(self, u):
        lo, hi = self.row_ptr[u], self.row_ptr[u + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def triplets(self):
        """Return ``(rows, cols, values)`` arrays in storage order."""
        rows = np.repeat(np.arange(self.rows, dtype=INDEX_DTYPE), self.row_counts())
        return rows, self.col_idx, self.values

    def triplet_set(self):
        rows, cols, vals = self.triplets()
        return {(int(r), int(c), float(v)) for r, c, v in zip(rows, cols, vals)}

    def to_dense(self, dtype=np.float64):
        out = np.zeros(self.shape, dtype=dtype)
        rows, cols, vals = self.triplets()
        out[rows, cols] = vals
        return out

    def transposed(self):
        """The same arrays read as the column-compressed form of the transpose."""
        return CscMatrix(self.cols, self.rows, self.row_ptr, self.col_idx, self.values)

    def validate(self):
        _validate_compressed(self.rows, self.cols, self.row_ptr, self.col_idx, self.values, "row")
        return self


@dataclass(frozen=True, eq=False)
class CscMatrix:
    """Column-compressed mirror of :class:`CsrMatrix`."""

    rows: int
    cols: int
    col_ptr: np.ndarray
    row_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self):
        return int(self.col_ptr[-1])

    @property
    def shape(self):
        return (self.rows, self.cols)

    def col_counts(self):
        return np.diff(self.col_ptr)

    def to_dense(self, dtype=np.float64):
        out = np.zeros(self.shape, dtype=dtype)
        cols = np.repeat(np.arange(self.cols), self.col_counts())
        out[self.row_idx, cols] = self.values
        return out

    def transposed(self):
        """Row-compressed view of the transpose; shares storage."""
        return CsrMatrix(self.cols, self.rows, self.col_ptr, self.row_idx, self.values)

    def validate(self):
        _validate_compressed(self.cols, self.rows, self.col_ptr, self.row_idx, self.values, "column")
        return self


def _validate_compressed(major, minor, ptr, idx, vals, axis):
    if ptr.shape != (major + 1,) or ptr[0] != 0:
        raise InputError(f"{axis} pointer must have length {major + 1} and start at 0")
    if np.any(np.diff(ptr) < 0):
        raise InputError(f"{axis} pointer is decreasing")
    nnz = int(ptr[-1])
    if len(idx) != nnz or len(vals) != nnz:
        raise InputError(f"index/value arrays do not match nnz={nnz}")
    if nnz == 0:
        return
    if idx.min() < 0 or idx.max() >= minor:
        raise InputError(f"index out of range [0, {minor})")
    step = np.diff(idx.astype(np.int64))
    starts = ptr[1:-1]
    # a non-increasing step is only allowed where a new row/column begins
    bad = step <= 0
    bad[starts[(starts > 0) & (starts < nnz)] - 1] = False
    if np.any(bad):
        raise InputError(f"indices within a {axis} are not strictly increasing")


def csr_from_arrays(m, n, rows, cols, values):
    """Build a :class:`CsrMatrix` from parallel coordinate arrays."""
    _check_dims(m, n)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=VALUE_DTYPE)
    if not (len(rows) == len(cols) == len(values)):
        raise InputError("coordinate arrays differ in length")
    if len(rows):
        bad = (rows < 0) | (rows >= m) | (cols < 0) | (cols >= n)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise InputError(f"coordinate ({rows[k]}, {cols[k]}) outside {m}x{n}")
    order = np.lexsort((cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    if len(rows) > 1:
        dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            raise InputError(f"duplicate coordinate ({rows[k]}, {cols[k]})")
    row_ptr = np.zeros(m + 1, dtype=OFFSET_DTYPE)
    np.cumsum(np.bincount(rows, minlength=m), out=row_ptr[1:])
    return CsrMatrix(m, n, row_ptr, cols.astype(INDEX_DTYPE), values)


def csr_from_triplets(m, n, triplets):
    """Build a :class:`CsrMatrix` from an iterable of ``(row, col, value)``."""
    triplets = list(triplets)
    if triplets:
        rows, cols, vals = zip(*triplets)
    else:
        rows, cols, vals = (), (), ()
    return csr_from_arrays(m, n, rows, cols, vals)


def _recompress(major, minor, ptr, idx, vals):
    # stable sort by minor index keeps major order inside each minor slot
    order = np.argsort(idx, kind="stable")
    major_of = np.repeat(np.arange(major, dtype=INDEX_DTYPE), np.diff(ptr))
    new_ptr = np.zeros(minor + 1, dtype=OFFSET_DTYPE)
    np.cumsum(np.bincount(idx, minlength=minor), out=new_ptr[1:])
    return new_ptr, major_of[order], vals[order]


def csr_to_csc(a):
    col_ptr, row_idx, values = _recompress(a.rows, a.cols, a.row_ptr, a.col_idx, a.values)
    return CscMatrix(a.rows, a.cols, col_ptr, row_idx, values)


def csc_to_csr(a):
    row_ptr, col_idx, values = _recompress(a.cols, a.rows, a.col_ptr, a.row_idx, a.values)
    return CsrMatrix(a.rows, a.cols, row_ptr, col_idx, values)


@dataclass(frozen=True, eq=False)
class GridPartition:
    """``p`` column blocks by ``q`` row blocks; ``blocks[i][j]`` holds the
    rows of row block ``j`` restricted to the columns of column block ``i``."""

    p: int
    q: int
    blocks: list
    row_cuts: np.ndarray
    col_cuts: np.ndarray
    shape: tuple = field(default=(0, 0))

    def block(self, i, j):
        return self.blocks[i][j]

    @property
    def nnz(self):
        return sum(b.nnz for col in self.blocks for b in col)

    def row_range(self, j):
        return int(self.row_cuts[j]), int(self.row_cuts[j + 1])

    def col_range(self, i):
        return int(self.col_cuts[i]), int(self.col_cuts[i + 1])


def grid_partition(r, p, q):
    m, n = r.shape
    if not (1 <= q <= max(m, 1)):
        raise InputError(f"q={q} must lie in [1, {m}]")
    if not (1 <= p <= max(n, 1)):
        raise InputError(f"p={p} must lie in [1, {n}]")
    row_cuts = even_cuts(m, q)
    col_cuts = even_cuts(n, p)
    blocks = [[None] * q for _ in range(p)]
    for j in range(q):
        r0, r1 = int(row_cuts[j]), int(row_cuts[j + 1])
        lo, hi = int(r.row_ptr[r0]), int(r.row_ptr[r1])
        cols = r.col_idx[lo:hi]
        vals = r.values[lo:hi]
        local_rows = np.repeat(np.arange(r1 - r0), np.diff(r.row_ptr[r0 : r1 + 1]))
        owner = np.searchsorted(col_cuts, cols, side="right") - 1
        for i in range(p):
            mask = owner == i
            row_ptr = np.zeros(r1 - r0 + 1, dtype=OFFSET_DTYPE)
            np.cumsum(np.bincount(local_rows[mask], minlength=r1 - r0), out=row_ptr[1:])
            blocks[i][j] = CsrMatrix(
                r1 - r0,
                n,
                row_ptr,
                np.ascontiguousarray(cols[mask]),
                np.ascontiguousarray(vals[mask]),
                row_offset=r0,
                col_offset=int(col_cuts[i]),
                col_span=int(col_cuts[i + 1] - col_cuts[i]),
            )
    return GridPartition(p, q, blocks, row_cuts, col_cuts, shape=(m, n))
