"""Single-worker ALS: loss, Hermitian assembly, batched solves, iterations.

Factors are dense ``float32`` arrays of shape ``(rows, f)``. Hermitian
batches are accumulated in double precision unless
``SolverConfig.accumulate_double`` is off.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError, NumericalError
from .sparse import CscMatrix, CsrMatrix, Triplets, even_cuts

_logger = logging.getLogger(__name__)

FACTOR_DTYPE = np.float32
DEFAULT_BIN = 16


@dataclass
class SolverConfig:
    lam: float = 0.05
    bin: int = DEFAULT_BIN
    batch_rows: int = 8192
    accumulate_double: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise InputError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.bin < 1:
            raise InputError(f"bin must be >= 1, got {self.bin}")
        if self.batch_rows < 1:
            raise InputError(f"batch_rows must be >= 1, got {self.batch_rows}")
        if self.threads < 1:
            raise InputError(f"threads must be >= 1, got {self.threads}")

    @property
    def acc_dtype(self):
        return np.float64 if self.accumulate_double else np.float32


@dataclass
class HermitianBatch:
    """Normal equations ``a[k] @ x_k = b[k]`` for a run of consecutive rows."""

    a: np.ndarray
    b: np.ndarray

    @property
    def count(self):
        return self.a.shape[0]

    @property
    def rank(self):
        return self.a.shape[1]

    @classmethod
    def zeros(cls, count, rank, dtype=np.float64):
        return cls(np.zeros((count, rank, rank), dtype), np.zeros((count, rank), dtype))

    def slice(self, start, stop):
        return HermitianBatch(self.a[start:stop], self.b[start:stop])

    def copy(self):
        return HermitianBatch(self.a.copy(), self.b.copy())

    def is_symmetric(self):
        return bool(np.array_equal(self.a, np.swapaxes(self.a, 1, 2)))


def as_factor(arr, rows=None):
    out = np.ascontiguousarray(arr, dtype=FACTOR_DTYPE)
    if out.ndim != 2 or out.shape[1] < 1:
        raise InputError(f"factor must be 2-D with rank >= 1, got shape {out.shape}")
    if rows is not None and out.shape[0] != rows:
        raise InputError(f"factor has {out.shape[0]} rows, expected {rows}")
    if not np.isfinite(out).all():
        raise InputError("factor contains non-finite entries")
    return out


def init_factors(m, n, rank, seed):
    """Uniform [0, 1) factors from a seeded generator; X is drawn first."""
    rng = np.random.default_rng(seed)
    x = rng.random((m, rank), dtype=np.float32)
    theta = rng.random((n, rank), dtype=np.float32)
    return x, theta


def _factor_span(r, theta):
    # blocks store global column ids; theta covers [col_offset, col_offset + len)
    expected = r.col_span if r.col_span is not None else r.cols
    if theta.shape[0] != expected:
        raise InputError(f"factor has {theta.shape[0]} rows, matrix covers {expected} columns")


def _run_ranges(total, threads, fn):
    """Call ``fn(start, stop)`` over ``threads`` contiguous chunks."""
    chunks = min(threads, total)
    if chunks <= 1:
        return [fn(0, total)]
    cuts = even_cuts(total, chunks)
    with ThreadPoolExecutor(max_workers=chunks) as pool:
        futs = [pool.submit(fn, int(cuts[k]), int(cuts[k + 1])) for k in range(chunks)]
        return [fut.result() for fut in futs]


def get_hermitian_base(r_rows, theta, lam, accumulate_double=True):
    """Reference assembly: one rank-one update per rating, no tiling."""
    theta = as_factor(theta)
    _factor_span(r_rows, theta)
    dtype = np.float64 if accumulate_double else np.float32
    f = theta.shape[1]
    batch = HermitianBatch.zeros(r_rows.rows, f, dtype)
    for u in range(r_rows.rows):
        cols, vals = r_rows.row(u)
        a = np.zeros((f, f), dtype)
        b = np.zeros(f, dtype)
        for v, r in zip(cols, vals):
            t = theta[int(v) - r_rows.col_offset].astype(dtype)
            a += np.multiply.outer(t, t)
            b += dtype(r) * t
        a[np.diag_indices(f)] += dtype(len(cols) * lam)
        batch.a[u] = a
        batch.b[u] = b
    return batch


def get_hermitian_mo(r_rows, theta, cfg, rows=None):
    """Tiled assembly for rows ``rows=(start, stop)`` (default: all rows).

    Factor rows for each matrix row are gathered ``cfg.bin`` at a time into
    a contiguous tile and accumulated into a private lower-triangular
    buffer that is written out and mirrored once per row.
    """
    theta = as_factor(theta)
    _factor_span(r_rows, theta)
    start, stop = rows if rows is not None else (0, r_rows.rows)
    count = stop - start
    batch = HermitianBatch.zeros(count, theta.shape[1], cfg.acc_dtype)

    def work(lo, hi):
        kernels.hermitian_rows(
            r_rows.row_ptr, r_rows.col_idx, r_rows.values, theta,
            r_rows.col_offset, float(cfg.lam), cfg.bin,
            start + lo, start + hi, batch.a[lo:hi], batch.b[lo:hi],
        )

    _run_ranges(count, cfg.threads, work)
    return batch


def batch_solve(batch, threads=1, on_breakdown="raise"):
    """Solve every ``a[k] x = b[k]`` by Cholesky; returns ``float32`` rows.

    Entries with an all-zero matrix (rows without ratings) give zero rows.
    A non-positive pivot raises :class:`NumericalError` carrying the batch
    index, or zeroes that row when ``on_breakdown="zero"``.
    """
    count, f = batch.count, batch.rank
    a = np.ascontiguousarray(batch.a)
    b = np.ascontiguousarray(batch.b)
    x = np.zeros((count, f), dtype=FACTOR_DTYPE)

    def work(lo, hi):
        while lo < hi:
            bad = kernels.solve_rows(a, b, x, lo, hi)
            if bad < 0:
                return
            if on_breakdown != "zero":
                raise NumericalError(f"Cholesky breakdown at batch index {bad}", index=bad)
            _logger.warning("Cholesky breakdown at batch index %d; row zeroed", bad)
            x[bad] = 0
            lo = bad + 1

    _run_ranges(count, threads, work)
    return x


def update_x(r, theta, cfg):
    """Exact minimiser of the loss over X with ``theta`` fixed.

    Rows are processed ``cfg.batch_rows`` at a time so at most
    ``batch_rows * f * f`` Hermitian entries are alive at once.
    """
    theta = as_factor(theta, rows=r.cols)
    x = np.zeros((r.rows, theta.shape[1]), dtype=FACTOR_DTYPE)
    for lo in range(0, r.rows, cfg.batch_rows):
        hi = min(lo + cfg.batch_rows, r.rows)
        batch = get_hermitian_mo(r, theta, cfg, rows=(lo, hi))
        x[lo:hi] = batch_solve(batch, threads=cfg.threads)
    return x


def update_theta(r_csc, x, cfg):
    """Column-side update: the same solve run over the transposed matrix."""
    if not isinstance(r_csc, CscMatrix):
        raise InputError("update_theta needs the column-compressed matrix")
    return update_x(r_csc.transposed(), x, cfg)


def _as_triplets(test):
    if isinstance(test, CsrMatrix):
        return test.triplets()
    if isinstance(test, Triplets):
        return test.rows, test.cols, test.values
    test = list(test)
    if not test:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float32))
    rows, cols, vals = zip(*test)
    return np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=np.float32)


def _predict(x, theta, rows, cols, chunk=1 << 20):
    out = np.empty(len(rows), dtype=np.float64)
    for s in range(0, len(rows), chunk):
        e = s + chunk
        xu = x[rows[s:e]].astype(np.float64)
        tv = theta[cols[s:e]].astype(np.float64)
        out[s:e] = np.einsum("kf,kf->k", xu, tv)
    return out


def loss(r, x, theta, lam):
    """Weighted-lambda regularised squared error over the observed ratings."""
    x = as_factor(x, rows=r.rows)
    theta = as_factor(theta, rows=r.cols)
    rows, cols, vals = r.triplets()
    resid = vals.astype(np.float64) - _predict(x, theta, rows, cols)
    n_x = r.row_counts().astype(np.float64)
    n_theta = np.bincount(cols, minlength=r.cols).astype(np.float64)
    x64, t64 = x.astype(np.float64), theta.astype(np.float64)
    penalty = np.dot(n_x, np.einsum("uf,uf->u", x64, x64)) + np.dot(
        n_theta, np.einsum("vf,vf->v", t64, t64)
    )
    return float(np.dot(resid, resid) + lam * penalty)


def rmse(test, x, theta):
    rows, cols, vals = _as_triplets(test)
    if len(rows) == 0:
        raise InputError("RMSE needs a non-empty test set")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.min() < 0 or rows.max() >= x.shape[0] or cols.min() < 0 or cols.max() >= theta.shape[0]:
        raise InputError("test coordinates outside the factor shapes")
    err = np.asarray(vals, dtype=np.float64) - _predict(x, theta, rows, cols)
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class IterationMetrics:
    iteration: int
    wall_seconds: float
    loss_after_x: float
    train_loss: float
    test_rmse: float


@dataclass
class TrainResult:
    x: np.ndarray
    theta: np.ndarray
    history: list = field(default_factory=list)


def als_train(r, r_csc, test, cfg, iterations, *, rank=None, seed=0, init=None,
              resume=None, x_step=None, theta_step=None, on_half_step=None,
              on_iteration=None, track_half_steps=True):
    """Run ``iterations`` rounds of update-X then update-Theta.

    ``init`` supplies starting ``(x, theta)``; otherwise both are drawn
    uniformly from [0, 1) with ``seed``. ``resume=(iteration, which,
    factor)`` restarts after a completed half step, ``which`` being ``"X"``
    or ``"T"``. ``x_step``/``theta_step`` replace the single-worker
    updates. ``on_half_step(iteration, which, factor)`` fires after every
    half step (the checkpoint hook); ``on_iteration(metrics)`` after
    every full iteration.
    """
    x_step = x_step or (lambda th: update_x(r, th, cfg))
    theta_step = theta_step or (lambda xx: update_theta(r_csc, xx, cfg))
    if init is not None:
        x, theta = (as_factor(init[0], r.rows), as_factor(init[1], r.cols))
    else:
        if rank is None:
            raise InputError("rank is required without explicit initial factors")
        x, theta = init_factors(r.rows, r.cols, rank, seed)
    result = TrainResult(x, theta)
    has_test = test is not None and len(_as_triplets(test)[0]) > 0

    first = 1
    pending_theta = False
    if resume is not None:
        it, which, factor = resume
        if which == "X":
            x = as_factor(factor, r.rows)
            first, pending_theta = it, True
        else:
            theta = as_factor(factor, r.cols)
            first = it + 1

    t0 = time.perf_counter()
    for it in range(first, iterations + 1):
        loss_x = float("nan")
        if not pending_theta:
            x = x_step(theta)
            if track_half_steps:
                loss_x = loss(r, x, theta, cfg.lam)
            if on_half_step:
                on_half_step(it, "X", x)
        pending_theta = False
        theta = theta_step(x)
        if on_half_step:
            on_half_step(it, "T", theta)
        metrics = IterationMetrics(
            iteration=it,
            wall_seconds=time.perf_counter() - t0,
            loss_after_x=loss_x,
            train_loss=loss(r, x, theta, cfg.lam),
            test_rmse=rmse(test, x, theta) if has_test else float("nan"),
        )
        _logger.info("iteration %d: J=%.6g rmse=%.6f", it, metrics.train_loss, metrics.test_rmse)
        result.history.append(metrics)
        if on_iteration:
            on_iteration(metrics)
    result.x, result.theta = x, theta
    return result
