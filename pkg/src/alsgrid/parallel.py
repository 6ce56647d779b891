"""Multi-worker ALS: partition planning, data-parallel Hermitian
accumulation, topology-aware parallel reduction and partitioned solves.

Workers are threads with a declared memory capacity counted in scalars.
Capacity is enforced by accounting, not by real allocation limits.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import CapacityError, InputError
from .solver import (
    FACTOR_DTYPE,
    HermitianBatch,
    as_factor,
    batch_solve,
    get_hermitian_mo,
)
from .sparse import even_cuts, grid_partition

_logger = logging.getLogger(__name__)

ONE_PHASE = "one_phase"
TWO_PHASE = "two_phase"
SCHEMES = (ONE_PHASE, TWO_PHASE)


@dataclass
class Topology:
    """``groups`` partition the workers; each group models one socket."""

    workers: int
    groups: list = None
    capacity: float = float("inf")

    def __post_init__(self):
        if self.workers < 1:
            raise InputError(f"worker count must be >= 1, got {self.workers}")
        if self.groups is None:
            self.groups = [list(range(self.workers))]
        self.groups = [list(g) for g in self.groups]
        flat = sorted(w for g in self.groups for w in g)
        if flat != list(range(self.workers)) or any(not g for g in self.groups):
            raise InputError(f"groups {self.groups} must be disjoint and cover workers 0..{self.workers - 1}")
        if not self.capacity > 0:
            raise InputError(f"capacity must be positive, got {self.capacity}")

    @classmethod
    def flat(cls, workers, capacity=float("inf")):
        return cls(workers, [list(range(workers))], capacity)

    def group_of(self, worker):
        for k, g in enumerate(self.groups):
            if worker in g:
                return k
        raise InputError(f"unknown worker {worker}")


def parse_groups(spec):
    """``"0,1;2,3"`` -> ``[[0, 1], [2, 3]]``."""
    try:
        return [[int(w) for w in part.split(",") if w.strip()] for part in spec.split(";") if part.strip()]
    except ValueError as exc:
        raise InputError(f"bad group spec {spec!r}") from exc


# -- partition planning ----------------------------------------------------

TERM_NAMES = ("m*f/q", "n*f/p", "|R_ij|", "(m/q)*f^2", "(m/q)*f", "headroom")


def footprint_terms(m, n, nnz, f, p, q, headroom=0.0):
    """Per-worker memory terms, in scalars, for a ``(p, q)`` grid.

    The rating block is a CSR block holding ``2 * nnz / (p * q)`` index and
    value entries plus ``m / q + 1`` row offsets.
    """
    rows = m / q
    return {
        "m*f/q": rows * f,
        "n*f/p": n * f / p,
        "|R_ij|": 2 * nnz / (p * q) + rows + 1,
        "(m/q)*f^2": rows * f * f,
        "(m/q)*f": rows * f,
        "headroom": float(headroom),
    }


def binding_term(terms):
    return max(terms, key=terms.get)


@dataclass
class PartitionPlan:
    p: int
    q: int
    headroom: float
    per_worker_footprint: float
    capacity: float
    terms: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def describe(self):
        lines = [f"p={self.p} q={self.q}"]
        for name in TERM_NAMES:
            lines.append(f"  {name:<10} {self.terms[name]:>20,.0f}")
        lines.append(f"  {'total':<10} {self.per_worker_footprint:>20,.0f} < capacity {self.capacity:,.0f}")
        lines.append(f"  binding term: {binding_term(self.terms)}")
        for p, q, total, term in self.rejected:
            lines.append(f"  rejected p={p} q={q}: {total:,.0f} >= capacity ({term} dominates)")
        return "\n".join(lines)


def plan_partition(m, n, nnz, f, topo, headroom=0.0):
    """Smallest feasible ``(p, q)`` for per-worker capacity ``topo.capacity``.

    ``p = 1`` is tried first, taking the smallest ``q`` that fits. Failing
    that the search starts from ``p`` with ``n * f / p`` about half the
    capacity and again takes the smallest fitting ``q``.
    """
    if min(m, n, f) < 1 or nnz < 0:
        raise InputError(f"bad problem shape m={m} n={n} nnz={nnz} f={f}")
    cap = float(topo.capacity)
    if headroom >= cap:
        raise InputError(f"headroom {headroom} must be below capacity {cap}")

    def smallest_q(p):
        return smallest_feasible_q(m, n, nnz, f, p, cap, headroom)

    rejected = []

    def reject(p, q):
        terms = footprint_terms(m, n, nnz, f, p, q, headroom)
        rejected.append((p, q, sum(terms.values()), binding_term(terms)))

    p = 1
    q = smallest_q(1)
    if q is None:
        reject(1, m)
        p_lo = max(2, math.ceil(2 * n * f / cap))
        p_lo = min(p_lo, n)
        if smallest_q(n) is None:
            terms = footprint_terms(m, n, nnz, f, n, m, headroom)
            term = binding_term(terms)
            raise CapacityError(
                f"no feasible (p, q) within capacity {cap:,.0f}: even p={n}, q={m} needs "
                f"{sum(terms.values()):,.0f} scalars; {term} dominates",
                term=term,
            )
        lo, hi = p_lo, n
        while lo < hi:
            mid = (lo + hi) // 2
            if smallest_q(mid) is not None:
                hi = mid
            else:
                lo = mid + 1
        p = lo
        q = smallest_q(p)
    if q > 1:
        reject(p, q - 1)
    terms = footprint_terms(m, n, nnz, f, p, q, headroom)
    return PartitionPlan(p, q, float(headroom), sum(terms.values()), cap, terms, rejected)


def smallest_feasible_q(m, n, nnz, f, p, capacity, headroom=0.0):
    """Smallest ``q`` in ``[1, m]`` fitting a fixed ``p``, or ``None``.

    The footprint only shrinks as ``q`` grows, so a bisection suffices.
    """

    def fits(q):
        return sum(footprint_terms(m, n, nnz, f, p, q, headroom).values()) < capacity

    if not fits(m):
        return None
    lo, hi = 1, m
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


# -- reduction schedules ---------------------------------------------------


class Transfer(NamedTuple):
    src: int
    dst: int
    slice: int


@dataclass
class ReduceSchedule:
    """Transfers in execution order; each phase ends with a barrier."""

    scheme: str
    topo: Topology
    phases: list

    @property
    def phase1(self):
        return self.phases[0] if self.phases else []

    @property
    def phase2(self):
        return self.phases[1] if len(self.phases) > 1 else []

    def transfers(self):
        return [t for ph in self.phases for t in ph]

    def cross_group_count(self):
        g = self.topo.group_of
        return sum(1 for t in self.transfers() if g(t.src) != g(t.dst))

    def sent_counts(self, phase=None):
        ts = self.transfers() if phase is None else self.phases[phase]
        c = Counter(t.src for t in ts)
        return [c.get(w, 0) for w in range(self.topo.workers)]

    def received_counts(self, phase=None):
        ts = self.transfers() if phase is None else self.phases[phase]
        c = Counter(t.dst for t in ts)
        return [c.get(w, 0) for w in range(self.topo.workers)]


def build_reduce_schedule(topo, scheme=ONE_PHASE):
    """Worker ``i`` ends up owning the fully reduced slice ``i``.

    One phase: every worker sends slice ``i`` straight to worker ``i``.
    Two phase: slice ``i`` is first summed inside each group onto a holder
    (the owner itself in the owner's group), then each foreign holder sends
    its partial sum across groups to the owner.
    """
    p = topo.workers
    if scheme == ONE_PHASE:
        phase = [Transfer(k, i, i) for i in range(p) for k in range(p) if k != i]
        return ReduceSchedule(scheme, topo, [phase])
    if scheme != TWO_PHASE:
        raise InputError(f"unknown reduction scheme {scheme!r}")
    if len(topo.groups) < 2:
        raise InputError("two-phase reduction needs at least two worker groups")
    phase1, phase2 = [], []
    # foreign slices are dealt round-robin to each group's members, so every
    # worker holds the same number of slices as its group mates (+-1)
    dealt = [0] * len(topo.groups)
    for i in range(p):
        for k, g in enumerate(topo.groups):
            if i in g:
                holder = i
            else:
                holder = g[dealt[k] % len(g)]
                dealt[k] += 1
            phase1.extend(Transfer(k, holder, i) for k in g if k != holder)
            if holder != i:
                phase2.append(Transfer(holder, i, i))
    return ReduceSchedule(scheme, topo, [phase1, phase2])


def _slice_cuts(count, p):
    return even_cuts(count, p)


def parallel_reduce(parts, schedule, threads=1):
    """Execute ``schedule`` over per-worker partial batches.

    Returns the list of reduced slices, slice ``i`` being the one resident
    on worker ``i``. Inputs are not modified. Each receiver adds its
    incoming partials in ascending source order, so the result does not
    depend on ``threads``.
    """
    p = schedule.topo.workers
    if len(parts) != p:
        raise InputError(f"{len(parts)} partial batches for {p} workers")
    count, rank = parts[0].count, parts[0].rank
    for part in parts:
        if part.count != count or part.rank != rank or part.a.dtype != parts[0].a.dtype:
            raise InputError("partial batches differ in shape or precision")
    cuts = _slice_cuts(count, p)
    held = [
        {i: parts[w].slice(int(cuts[i]), int(cuts[i + 1])) for i in range(p)} for w in range(p)
    ]

    for phase in schedule.phases:
        incoming = {}
        for t in phase:
            if t.slice not in held[t.src]:
                raise InputError(f"worker {t.src} no longer holds slice {t.slice}")
            incoming.setdefault(t.dst, []).append(t)

        def receive(dst):
            out = {}
            for t in sorted(incoming[dst], key=lambda t: (t.slice, t.src)):
                acc = out.get(t.slice, held[dst][t.slice])
                src = held[t.src][t.slice]
                out[t.slice] = HermitianBatch(acc.a + src.a, acc.b + src.b)
            return dst, out

        dsts = sorted(incoming)
        if threads > 1 and len(dsts) > 1:
            with ThreadPoolExecutor(max_workers=min(threads, len(dsts))) as pool:
                results = list(pool.map(receive, dsts))
        else:
            results = [receive(d) for d in dsts]
        # barrier: apply hand-offs only after every receiver has read its inputs
        for t in phase:
            held[t.src].pop(t.slice, None)
        for dst, out in results:
            held[dst].update(out)

    for w in range(p):
        if set(held[w]) != {w}:
            raise InputError(f"schedule leaves worker {w} holding slices {sorted(held[w])}")
    return [held[i][i] for i in range(p)]


# -- scale-up update -------------------------------------------------------


def split_factor(factor, cuts):
    return [np.ascontiguousarray(factor[int(cuts[i]) : int(cuts[i + 1])]) for i in range(len(cuts) - 1)]


def local_hermitian(block, theta_part, cfg):
    """Partial normal equations of one grid block.

    The ridge term counts only the block's own ratings, so summing the
    partials over all column blocks gives the full ``n_u * lam`` weight.
    """
    if block.col_span is not None and theta_part.shape[0] != block.col_span:
        raise InputError(
            f"factor partition has {theta_part.shape[0]} rows, block spans {block.col_span} columns"
        )
    return get_hermitian_mo(block, theta_part, cfg)


def block_footprint(grid, i, j, f, headroom=0.0):
    r0, r1 = grid.row_range(j)
    c0, c1 = grid.col_range(i)
    rows = r1 - r0
    return (
        rows * f
        + (c1 - c0) * f
        + 2 * grid.block(i, j).nnz
        + rows
        + 1
        + rows * f * f
        + rows * f
        + headroom
    )


def su_als_update_x(grid, theta_parts, topo, cfg, scheme=ONE_PHASE, threads=None,
                    headroom=0.0, stats=None):
    """Partitioned update of X on ``grid.p`` logical workers.

    For each row partition in turn the workers assemble partial normal
    equations from their column partition, reduce them slice-wise with
    ``scheme`` and solve their own slice. ``threads`` physical threads run
    the workers (in waves when fewer than ``p``); the result does not
    depend on it.
    """
    p, q = grid.p, grid.q
    if topo.workers != p:
        raise InputError(f"topology has {topo.workers} workers, grid has p={p}")
    if len(theta_parts) != p:
        raise InputError(f"{len(theta_parts)} factor partitions for p={p}")
    theta_parts = [as_factor(t) for t in theta_parts]
    f = theta_parts[0].shape[1]
    for i, t in enumerate(theta_parts):
        c0, c1 = grid.col_range(i)
        if t.shape != (c1 - c0, f):
            raise InputError(f"factor partition {i} has shape {t.shape}, expected {(c1 - c0, f)}")
    for j in range(q):
        for i in range(p):
            need = block_footprint(grid, i, j, f, headroom)
            if need >= topo.capacity:
                raise CapacityError(
                    f"block ({i}, {j}) needs {need:,.0f} scalars, worker capacity is {topo.capacity:,.0f}",
                    term="(m/q)*f^2",
                )
    schedule = build_reduce_schedule(topo, scheme)
    threads = threads or p
    inner = replace(cfg, threads=1)
    m = grid.shape[0]
    x = np.zeros((m, f), dtype=FACTOR_DTYPE)
    if stats is not None:
        stats.setdefault("transfers", 0)
        stats.setdefault("cross_group_transfers", 0)
        stats.setdefault("reductions", 0)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for j in range(q):
            r0, r1 = grid.row_range(j)
            parts = list(pool.map(lambda i: local_hermitian(grid.block(i, j), theta_parts[i], inner), range(p)))
            # map() returning is the barrier after local assembly
            slices = parallel_reduce(parts, schedule, threads=threads)
            solved = list(pool.map(lambda s: batch_solve(s, threads=1), slices))
            x[r0:r1] = np.concatenate(solved)
            if stats is not None:
                stats["transfers"] += len(schedule.transfers())
                stats["cross_group_transfers"] += schedule.cross_group_count()
                stats["reductions"] += 1
    return x


class ScaleUpUpdater:
    """Holds the grids of R and its transpose for repeated partitioned
    updates; ``x_step``/``theta_step`` plug into :func:`als_train`."""

    def __init__(self, r, r_csc, cfg, x_grid_shape, theta_grid_shape, topo_x, topo_theta,
                 scheme=ONE_PHASE, threads=None, headroom=0.0):
        self.cfg = cfg
        self.scheme = scheme
        self.threads = threads
        self.headroom = headroom
        px, qx = x_grid_shape
        pt, qt = theta_grid_shape
        self.grid_x = grid_partition(r, px, qx)
        self.grid_t = grid_partition(r_csc.transposed(), pt, qt)
        self.topo_x = topo_x
        self.topo_t = topo_theta
        self.stats = {}

    def _scheme_for(self, topo):
        return self.scheme if len(topo.groups) >= 2 else ONE_PHASE

    def x_step(self, theta):
        parts = split_factor(theta, self.grid_x.col_cuts)
        return su_als_update_x(self.grid_x, parts, self.topo_x, self.cfg, self._scheme_for(self.topo_x),
                               self.threads, self.headroom, self.stats)

    def theta_step(self, x):
        parts = split_factor(x, self.grid_t.col_cuts)
        return su_als_update_x(self.grid_t, parts, self.topo_t, self.cfg, self._scheme_for(self.topo_t),
                               self.threads, self.headroom, self.stats)
