"""Rating file formats, splitting, synthetic duplication, block streaming
and factor checkpoints.

All binary layouts are little-endian.

Binary cache::

    magic b"ALSGCSR\\0" | version u64 | m u64 | n u64 | nnz u64
    row_ptr int64[m+1] | col_idx int32[nnz] | values float32[nnz]

Checkpoint::

    magic b"ALSGCKPT" | iteration u64 | which u8 (0=X, 1=Theta) | pad[7]
    rows u64 | f u64 | config digest [32] | factor float32[rows*f]
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import re
import struct
import tempfile
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, InputError, IntegrityError, ParseError
from .sparse import (
    INDEX_DTYPE,
    INDEX_LIMIT,
    OFFSET_DTYPE,
    VALUE_DTYPE,
    CsrMatrix,
    Triplets,
    csr_from_arrays,
)

_logger = logging.getLogger(__name__)

CACHE_MAGIC = b"ALSGCSR\0"
CACHE_VERSION = 1
CACHE_HEADER = struct.Struct("<8sQQQQ")

CKPT_MAGIC = b"ALSGCKPT"
CKPT_HEADER = struct.Struct("<8sQB7xQQ32s")
CKPT_NAME = re.compile(r"^ckpt_(\d+)_(X|T)\.bin$")
WHICH_CODE = {"X": 0, "T": 1}

FORMATS = ("triplet_text", "movielens", "binary_cache")


# -- text and binary loaders ------------------------------------------------


def _parse_text(path, one_based, sep):
    rows, cols, vals = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(sep) if sep else line.split()
            if len(parts) < 3:
                raise ParseError(f"expected at least 3 fields, got {len(parts)}", line=lineno)
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ParseError(f"malformed field ({exc})", line=lineno) from None
            if one_based:
                r, c = r - 1, c - 1
            if r < 0 or c < 0:
                raise ParseError(f"negative index ({parts[0]}, {parts[1]})", line=lineno)
            rows.append(r)
            cols.append(c)
            vals.append(v)
    return np.asarray(rows, np.int64), np.asarray(cols, np.int64), np.asarray(vals, VALUE_DTYPE)


@dataclass
class RatingsFile:
    path: str
    format: str = "triplet_text"
    m: int | None = None
    n: int | None = None

    def load(self):
        return load_ratings(self)


def load_ratings(file, format=None, m=None, n=None):
    """Load a rating matrix; ``file`` is a :class:`RatingsFile` or a path.

    Undeclared dimensions are inferred as ``max index + 1``.
    """
    if not isinstance(file, RatingsFile):
        file = RatingsFile(str(file), format or "triplet_text", m, n)
    if file.format == "binary_cache":
        r = read_binary_cache(file.path)
        if (file.m is not None and file.m != r.rows) or (file.n is not None and file.n != r.cols):
            raise InputError(f"cache holds {r.rows}x{r.cols}, declared {file.m}x{file.n}")
        return r
    if file.format == "triplet_text":
        rows, cols, vals = _parse_text(file.path, one_based=False, sep=None)
    elif file.format == "movielens":
        rows, cols, vals = _parse_text(file.path, one_based=True, sep="\t")
    else:
        raise InputError(f"unknown ratings format {file.format!r}; expected one of {FORMATS}")
    m = file.m if file.m is not None else (int(rows.max()) + 1 if len(rows) else 0)
    n = file.n if file.n is not None else (int(cols.max()) + 1 if len(cols) else 0)
    if len(rows) and (rows.max() >= m or cols.max() >= n):
        raise InputError(f"index ({rows.max()}, {cols.max()}) exceeds declared {m}x{n}")
    return csr_from_arrays(m, n, rows, cols, vals)


def write_triplets(path, triplets):
    """Write 0-based ``row col rating`` lines; ratings round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, v in triplets:
            fh.write(f"{r} {c} {float(np.float32(v))!r}\n")


def read_triplets(path):
    rows, cols, vals = _parse_text(path, one_based=False, sep=None)
    return Triplets(rows, cols, vals)


def _atomic_write(path, chunks):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_binary_cache(path, r):
    header = CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, r.rows, r.cols, r.nnz)
    return _atomic_write(
        path,
        [
            header,
            np.ascontiguousarray(r.row_ptr, dtype="<i8").tobytes(),
            np.ascontiguousarray(r.col_idx, dtype="<i4").tobytes(),
            np.ascontiguousarray(r.values, dtype="<f4").tobytes(),
        ],
    )


def read_binary_cache(path, mmap=False):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read(CACHE_HEADER.size)
    except OSError as exc:
        raise IntegrityError(f"cannot read {path}: {exc}") from exc
    if len(raw) < CACHE_HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, version, m, n, nnz = CACHE_HEADER.unpack(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise IntegrityError(f"{path}: not a version-{CACHE_VERSION} rating cache")
    expected = CACHE_HEADER.size + 8 * (m + 1) + 4 * nnz + 4 * nnz
    if path.stat().st_size != expected:
        raise IntegrityError(f"{path}: size {path.stat().st_size} != expected {expected}")
    off = CACHE_HEADER.size
    if mmap:
        load = lambda dt, count, offset: np.memmap(path, dtype=dt, mode="r", offset=offset, shape=(count,))
    else:
        load = lambda dt, count, offset: np.fromfile(path, dtype=dt, count=count, offset=offset)
    row_ptr = load("<i8", m + 1, off)
    col_idx = load("<i4", nnz, off + 8 * (m + 1))
    values = load("<f4", nnz, off + 8 * (m + 1) + 4 * nnz)
    return CsrMatrix(
        int(m), int(n),
        row_ptr.astype(OFFSET_DTYPE, copy=False),
        col_idx.astype(INDEX_DTYPE, copy=False),
        values.astype(VALUE_DTYPE, copy=False),
    )


# -- splitting and synthesis -----------------------------------------------


def split_train_test(r, holdout_fraction, seed):
    """Hold out ``floor(fraction * nnz)`` ratings drawn uniformly.

    Returns the training matrix (same shape) and the held-out
    :class:`Triplets` in storage order.
    """
    if not 0 < holdout_fraction < 1:
        raise InputError(f"holdout fraction must lie in (0, 1), got {holdout_fraction}")
    k = int(np.floor(holdout_fraction * r.nnz))
    rng = np.random.default_rng(seed)
    held = np.zeros(r.nnz, dtype=bool)
    held[rng.choice(r.nnz, size=k, replace=False)] = True
    rows, cols, vals = r.triplets()
    train = csr_from_arrays(r.rows, r.cols, rows[~held], cols[~held], vals[~held])
    test = Triplets(rows[held].astype(np.int64), cols[held].astype(np.int64), vals[held].copy())
    return train, test


def duplicate_synthesize(base, horiz, vert, noise=0.0, seed=0):
    """Tile ``base`` ``horiz`` times down the rows and ``vert`` times across
    the columns. Values are copied verbatim unless ``noise > 0`` adds
    Gaussian jitter of that standard deviation."""
    if horiz < 1 or vert < 1:
        raise InputError(f"duplication factors must be >= 1, got ({horiz}, {vert})")
    m, n = base.rows * horiz, base.cols * vert
    if m > INDEX_LIMIT or n > INDEX_LIMIT:
        raise CapacityError(f"duplicated shape {m}x{n} exceeds the 32-bit index domain")
    counts = base.row_counts()
    starts = np.repeat(base.row_ptr[:-1], counts)
    within = np.arange(base.nnz, dtype=np.int64) - starts
    cnt = np.repeat(counts, counts)
    k = np.arange(vert, dtype=np.int64)[:, None]
    newpos = vert * starts[None, :] + k * cnt[None, :] + within[None, :]
    band_cols = np.empty(base.nnz * vert, dtype=np.int64)
    band_cols[newpos.ravel()] = (base.col_idx.astype(np.int64)[None, :] + k * base.cols).ravel()
    band_vals = np.empty(base.nnz * vert, dtype=VALUE_DTYPE)
    band_vals[newpos.ravel()] = np.broadcast_to(base.values, (vert, base.nnz)).ravel()
    band_ptr = base.row_ptr * vert
    band_nnz = base.nnz * vert
    row_ptr = np.concatenate(
        [np.zeros(1, OFFSET_DTYPE)] + [band_ptr[1:] + h * band_nnz for h in range(horiz)]
    ).astype(OFFSET_DTYPE)
    values = np.tile(band_vals, horiz)
    if noise > 0:
        rng = np.random.default_rng(seed)
        values = (values + rng.normal(0.0, noise, size=values.shape)).astype(VALUE_DTYPE)
    return CsrMatrix(m, n, row_ptr, np.tile(band_cols, horiz).astype(INDEX_DTYPE), values)


def planted_instance(m, n, rank, density, seed=0):
    """Ratings ``X* Theta*^T`` sampled at ``density`` with uniform [0, 1)
    ground-truth factors. Returns ``(matrix, x_true, theta_true)``."""
    rng = np.random.default_rng(seed)
    x_true = rng.random((m, rank))
    theta_true = rng.random((n, rank))
    nnz = int(round(density * m * n))
    flat = rng.choice(m * n, size=nnz, replace=False)
    rows, cols = np.divmod(flat, n)
    vals = np.einsum("kf,kf->k", x_true[rows], theta_true[cols])
    return csr_from_arrays(m, n, rows, cols, vals), x_true, theta_true


# -- out-of-core blocks -----------------------------------------------------


def block_checksum(r):
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", r.rows, r.cols))
    for arr, dt in ((r.row_ptr, "<i8"), (r.col_idx, "<i4"), (r.values, "<f4")):
        h.update(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return h.hexdigest()


def _block_name(i, j):
    return f"block_{i}_{j}.bin"


def persist_grid(grid, directory):
    """Write each block as a binary cache plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for i in range(grid.p):
        for j in range(grid.q):
            b = grid.block(i, j)
            path = write_binary_cache(directory / _block_name(i, j), b)
            blocks[f"{i},{j}"] = {
                "file": path.name,
                "crc32": zlib.crc32(path.read_bytes()),
                "row_offset": b.row_offset,
                "col_offset": b.col_offset,
                "col_span": b.col_span,
            }
    manifest = {
        "p": grid.p,
        "q": grid.q,
        "shape": list(grid.shape),
        "row_cuts": [int(c) for c in grid.row_cuts],
        "col_cuts": [int(c) for c in grid.col_cuts],
        "blocks": blocks,
    }
    _atomic_write(directory / "manifest.json", [json.dumps(manifest, indent=1).encode()])
    return directory


def _read_manifest(directory):
    try:
        return json.loads((Path(directory) / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"cannot read block manifest in {directory}: {exc}") from exc


def load_block(directory, i, j, manifest=None):
    manifest = manifest or _read_manifest(directory)
    entry = manifest["blocks"].get(f"{i},{j}")
    if entry is None:
        raise IntegrityError(f"block ({i}, {j}) not in manifest", block=(i, j))
    path = Path(directory) / entry["file"]
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"block ({i}, {j}) missing: {exc}", block=(i, j)) from exc
    if zlib.crc32(data) != entry["crc32"]:
        raise IntegrityError(f"block ({i}, {j}) failed its checksum", block=(i, j))
    try:
        raw = read_binary_cache(path)
    except IntegrityError as exc:
        raise IntegrityError(f"block ({i}, {j}) corrupt: {exc}", block=(i, j)) from exc
    return CsrMatrix(
        raw.rows, raw.cols, raw.row_ptr, raw.col_idx, raw.values,
        row_offset=entry["row_offset"], col_offset=entry["col_offset"], col_span=entry["col_span"],
    )


_DONE = object()


def stream_blocks(directory, order=None, depth=2):
    """Yield ``((i, j), block)`` in ``order`` (default: row-major over j
    then i, the update order). A background thread loads ahead through a
    queue of ``depth`` slots so reading block k+1 overlaps use of block k."""
    manifest = _read_manifest(directory)
    if order is None:
        order = [(i, j) for j in range(manifest["q"]) for i in range(manifest["p"])]
    order = [tuple(o) for o in order]
    if len(order) <= 1:
        for i, j in order:
            yield (i, j), load_block(directory, i, j, manifest)
        return

    slots = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def loader():
        try:
            for i, j in order:
                if stop.is_set():
                    return
                slots.put(((i, j), load_block(directory, i, j, manifest)))
        except BaseException as exc:  # noqa: BLE001 - handed to the consumer
            slots.put(exc)
        slots.put(_DONE)

    th = threading.Thread(target=loader, name="block-prefetch", daemon=True)
    th.start()
    try:
        while True:
            item = slots.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                slots.get_nowait()
            except queue.Empty:
                th.join(timeout=0.01)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    iteration: int
    which: str
    factor: np.ndarray
    digest: bytes = b"\0" * 32

    @property
    def order_key(self):
        # Theta is updated second, so Theta@t is more recent than X@t
        return (self.iteration, WHICH_CODE[self.which])


def config_digest(text):
    return hashlib.sha256(text.encode("utf-8")).digest()


def write_checkpoint(directory, cp):
    if cp.which not in WHICH_CODE:
        raise InputError(f"checkpoint factor must be 'X' or 'T', got {cp.which!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    factor = np.ascontiguousarray(cp.factor, dtype="<f4")
    header = CKPT_HEADER.pack(
        CKPT_MAGIC, cp.iteration, WHICH_CODE[cp.which], factor.shape[0], factor.shape[1], cp.digest
    )
    return _atomic_write(directory / f"ckpt_{cp.iteration:06d}_{cp.which}.bin", [header, factor.tobytes()])


def read_checkpoint(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < CKPT_HEADER.size:
        raise IntegrityError(f"{path}: truncated checkpoint")
    magic, it, code, rows, f, digest = CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC or code not in (0, 1):
        raise IntegrityError(f"{path}: not a checkpoint")
    if len(data) != CKPT_HEADER.size + 4 * rows * f:
        raise IntegrityError(f"{path}: payload size mismatch")
    factor = np.frombuffer(data, dtype="<f4", offset=CKPT_HEADER.size).reshape(rows, f).astype(np.float32)
    return Checkpoint(int(it), "X" if code == 0 else "T", factor, digest)


def list_checkpoints(directory):
    directory = Path(directory)
    if not directory.is_dir():
        return []
    out = []
    for entry in directory.iterdir():
        mt = CKPT_NAME.match(entry.name)
        if mt:
            out.append(((int(mt.group(1)), WHICH_CODE[mt.group(2)]), entry))
    return [p for _, p in sorted(out)]


def restore_latest(directory, digest=None, which=None):
    """Most recent checkpoint (optionally only ``which`` factor), or
    ``None`` when there is none. A digest mismatch raises ConfigError."""
    paths = list_checkpoints(directory)
    if which is not None:
        paths = [p for p in paths if CKPT_NAME.match(p.name).group(2) == which]
    if not paths:
        return None
    cp = read_checkpoint(paths[-1])
    if digest is not None and cp.digest != digest:
        raise ConfigError(f"checkpoint {paths[-1].name} was written by a different configuration")
    return cp


class CheckpointWriter:
    """Writes checkpoints on a background thread, at most one in flight."""

    def __init__(self, directory, digest):
        self.directory = Path(directory)
        self.digest = digest
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="checkpoint")
        self._pending = None

    def submit(self, iteration, which, factor):
        self.wait()
        cp = Checkpoint(iteration, which, np.array(factor, dtype=np.float32, copy=True), self.digest)
        self._pending = self._pool.submit(write_checkpoint, self.directory, cp)

    def wait(self):
        if self._pending is not None:
            self._pending.result()
            self._pending = None

    def close(self):
        self.wait()
        self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
