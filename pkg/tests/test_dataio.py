import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alsgrid import dataio
from alsgrid.dataio import (
    Checkpoint,
    CheckpointWriter,
    RatingsFile,
    block_checksum,
    config_digest,
    duplicate_synthesize,
    list_checkpoints,
    load_block,
    load_ratings,
    persist_grid,
    planted_instance,
    read_binary_cache,
    read_checkpoint,
    read_triplets,
    restore_latest,
    split_train_test,
    stream_blocks,
    write_binary_cache,
    write_checkpoint,
    write_triplets,
)
from alsgrid.errors import CapacityError, ConfigError, InputError, IntegrityError, ParseError
from alsgrid.sparse import CsrMatrix, csr_from_triplets, grid_partition
from conftest import random_csr


def _same(a, b):
    return (
        a.shape == b.shape
        and np.array_equal(a.row_ptr, b.row_ptr)
        and np.array_equal(a.col_idx, b.col_idx)
        and np.array_equal(a.values, b.values)
    )


# -- loaders -----------------------------------------------------------------------


def test_triplet_text(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("0 0 3.5\n1 2 4.0")
    r = load_ratings(RatingsFile(str(p)))
    assert r.shape == (2, 3) and r.nnz == 2
    assert r.triplet_set() == {(0, 0, 3.5), (1, 2, 4.0)}


def test_movielens_shift(tmp_path):
    p = tmp_path / "u.data"
    p.write_text("1\t5\t3\t881250949\n")
    r = load_ratings(p, format="movielens")
    assert r.triplet_set() == {(0, 4, 3.0)}


def test_declared_dimensions(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("0 0 1\n")
    assert load_ratings(RatingsFile(str(p), m=4, n=5)).shape == (4, 5)
    p.write_text("0 7 1\n")
    with pytest.raises(InputError):
        load_ratings(RatingsFile(str(p), m=4, n=5))


@pytest.mark.parametrize("body,line", [("0 0 1\n1 x 2\n", 2), ("0 0 1\n\n0 1\n", 3), ("-1 0 1\n", 1)])
def test_parse_error_line_number(tmp_path, body, line):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(ParseError) as info:
        load_ratings(p)
    assert info.value.line == line


def test_unknown_format(tmp_path):
    p = tmp_path / "r.txt"
    p.write_text("0 0 1\n")
    with pytest.raises(InputError):
        load_ratings(p, format="parquet")


def test_triplet_text_roundtrip(tmp_path, rng):
    r = random_csr(rng, 30, 20, density=0.2)
    write_triplets(tmp_path / "t.txt", zip(*r.triplets()))
    back = read_triplets(tmp_path / "t.txt")
    assert back.as_set() == r.triplet_set()


# -- binary cache ------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(m=st.integers(0, 20), n=st.integers(0, 20), seed=st.integers(0, 2**31))
def test_cache_roundtrip_bit_exact(tmp_path_factory, m, n, seed):
    r = random_csr(np.random.default_rng(seed), max(m, 1), max(n, 1), density=0.3)
    path = tmp_path_factory.mktemp("cache") / "r.bin"
    write_binary_cache(path, r)
    for mm in (False, True):
        back = read_binary_cache(path, mmap=mm)
        assert _same(r, back)
        assert back.values.tobytes() == r.values.tobytes()


def test_cache_loads_through_load_ratings(tmp_path, rng):
    r = random_csr(rng, 10, 9, nnz=30)
    write_binary_cache(tmp_path / "r.bin", r)
    assert _same(load_ratings(tmp_path / "r.bin", format="binary_cache"), r)


def test_cache_detects_truncation(tmp_path, rng):
    r = random_csr(rng, 10, 9, nnz=30)
    path = write_binary_cache(tmp_path / "r.bin", r)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(IntegrityError):
        read_binary_cache(path)
    path.write_bytes(b"NOTACSR!" + data[8:])
    with pytest.raises(IntegrityError):
        read_binary_cache(path)


def test_cache_header_layout(tmp_path):
    r = csr_from_triplets(3, 4, [(0, 1, 2.0), (2, 3, 1.0)])
    data = write_binary_cache(tmp_path / "r.bin", r).read_bytes()
    magic, version, m, n, nnz = dataio.CACHE_HEADER.unpack_from(data)
    assert (version, m, n, nnz) == (1, 3, 4, 2)
    assert len(data) == dataio.CACHE_HEADER.size + 8 * 4 + 4 * 2 + 4 * 2


# -- splitting --------------------------------------------------------------------


def test_split_tiny_fraction_holds_nothing(rng):
    r = random_csr(rng, 10, 10, nnz=20)
    train, test = split_train_test(r, 0.01, seed=0)
    assert len(test) == 0 and _same(train, r)


def test_split_deterministic(rng):
    r = random_csr(rng, 40, 40, nnz=300)
    a = split_train_test(r, 0.2, seed=5)
    b = split_train_test(r, 0.2, seed=5)
    assert a[1].as_set() == b[1].as_set() and _same(a[0], b[0])
    c = split_train_test(r, 0.2, seed=6)
    assert c[1].as_set() != a[1].as_set()


def test_split_exact_count_and_partition(rng):
    r = random_csr(rng, 200, 200, nnz=10_000)
    train, test = split_train_test(r, 0.1, seed=1)
    assert len(test) == 1000
    train_set, test_set = train.triplet_set(), test.as_set()
    assert not train_set & test_set
    assert train_set | test_set == r.triplet_set()
    assert train.nnz + len(test) == r.nnz


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_fraction(rng, frac):
    with pytest.raises(InputError):
        split_train_test(random_csr(rng, 5, 5, nnz=5), frac, 0)


# -- duplication ------------------------------------------------------------------


def test_duplicate_identity(rng):
    r = random_csr(rng, 7, 6, nnz=15)
    assert _same(duplicate_synthesize(r, 1, 1), r)


def test_duplicate_three_by_two():
    base = csr_from_triplets(2, 2, [(0, 1, 1.5), (1, 0, 2.5)])
    d = duplicate_synthesize(base, 3, 2).validate()
    assert d.shape == (6, 4) and d.nnz == 12
    dense = d.to_dense()
    for h in range(3):
        for v in range(2):
            assert np.array_equal(dense[2 * h : 2 * h + 2, 2 * v : 2 * v + 2], base.to_dense())


@settings(max_examples=30, deadline=None)
@given(
    m=st.integers(1, 12),
    n=st.integers(1, 12),
    horiz=st.integers(1, 4),
    vert=st.integers(1, 4),
    seed=st.integers(0, 2**31),
)
def test_duplicate_blocks_equal_base(m, n, horiz, vert, seed):
    base = random_csr(np.random.default_rng(seed), m, n, density=0.4)
    d = duplicate_synthesize(base, horiz, vert).validate()
    assert d.shape == (m * horiz, n * vert) and d.nnz == base.nnz * horiz * vert
    g = grid_partition(d, vert, horiz)
    for i in range(vert):
        for j in range(horiz):
            b = g.block(i, j)
            local = CsrMatrix(b.rows, n, b.row_ptr, b.col_idx - b.col_offset, b.values)
            assert _same(local, base)
            assert np.array_equal(b.row_counts(), base.row_counts())


def test_duplicate_overflow():
    base = csr_from_triplets(2**20, 2, [(0, 0, 1.0)])
    with pytest.raises(CapacityError):
        duplicate_synthesize(base, 2**12, 1)


def test_duplicate_noise_is_opt_in(rng):
    r = random_csr(rng, 5, 5, nnz=10)
    noisy = duplicate_synthesize(r, 2, 2, noise=0.1, seed=3)
    clean = duplicate_synthesize(r, 2, 2)
    assert np.array_equal(noisy.col_idx, clean.col_idx)
    assert not np.array_equal(noisy.values, clean.values)


def test_planted_instance_shape():
    r, x, t = planted_instance(50, 40, 3, 0.1, seed=2)
    assert r.shape == (50, 40) and r.nnz == 200
    rows, cols, vals = r.triplets()
    assert np.allclose(vals, np.einsum("kf,kf->k", x[rows], t[cols]), rtol=1e-6)


# -- block streaming --------------------------------------------------------------


@pytest.fixture
def persisted(tmp_path, rng):
    r = random_csr(rng, 30, 24, density=0.3)
    g = grid_partition(r, 2, 2)
    persist_grid(g, tmp_path / "blocks")
    return g, tmp_path / "blocks"


def test_stream_single_block(tmp_path, rng):
    r = random_csr(rng, 10, 10, nnz=20)
    persist_grid(grid_partition(r, 1, 1), tmp_path)
    before = threading.active_count()
    out = list(stream_blocks(tmp_path))
    assert len(out) == 1 and _same(out[0][1], r)
    assert threading.active_count() == before


def test_stream_order(persisted):
    g, d = persisted
    order = [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [k for k, _ in stream_blocks(d, order)] == order
    rev = order[::-1]
    assert [k for k, _ in stream_blocks(d, rev)] == rev


def test_stream_checksums_match_direct(persisted):
    g, d = persisted
    for (i, j), b in stream_blocks(d):
        assert block_checksum(b) == block_checksum(load_block(d, i, j)) == block_checksum(g.block(i, j))
        assert b.col_offset == g.block(i, j).col_offset and b.col_span == g.block(i, j).col_span


def test_stream_corrupt_block_names_it(persisted):
    g, d = persisted
    path = d / "block_1_0.bin"
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError) as info:
        list(stream_blocks(d))
    assert info.value.block == (1, 0)
    assert "(1, 0)" in str(info.value)


def test_stream_missing_block(persisted):
    g, d = persisted
    (d / "block_0_1.bin").unlink()
    with pytest.raises(IntegrityError) as info:
        list(stream_blocks(d))
    assert info.value.block == (0, 1)


def test_stream_early_exit_stops_loader(persisted):
    g, d = persisted
    before = threading.active_count()
    it = stream_blocks(d)
    next(it)
    it.close()
    assert threading.active_count() == before


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, rng):
    f = rng.random((13, 4)).astype(np.float32)
    dg = config_digest("a=1")
    path = write_checkpoint(tmp_path, Checkpoint(2, "X", f, dg))
    cp = read_checkpoint(path)
    assert cp.iteration == 2 and cp.which == "X" and cp.digest == dg
    assert cp.factor.tobytes() == f.tobytes()
    assert not list(tmp_path.glob("*.tmp*"))


def _write(d, it, which, val=0.0):
    write_checkpoint(d, Checkpoint(it, which, np.full((3, 2), val, np.float32), config_digest("c")))


def test_restore_theta_outranks_x(tmp_path):
    _write(tmp_path, 3, "X")
    _write(tmp_path, 3, "T")
    cp = restore_latest(tmp_path)
    assert (cp.iteration, cp.which) == (3, "T")


def test_restore_later_x_wins(tmp_path):
    _write(tmp_path, 4, "X")
    _write(tmp_path, 3, "T")
    cp = restore_latest(tmp_path)
    assert (cp.iteration, cp.which) == (4, "X")
    assert restore_latest(tmp_path, which="T").iteration == 3


def test_restore_ordering_is_numeric(tmp_path):
    _write(tmp_path, 9, "T")
    _write(tmp_path, 10, "X")
    assert restore_latest(tmp_path).iteration == 10
    assert [p.name for p in list_checkpoints(tmp_path)] == ["ckpt_000009_T.bin", "ckpt_000010_X.bin"]


def test_restore_absent(tmp_path):
    assert restore_latest(tmp_path) is None
    assert restore_latest(tmp_path / "missing") is None


def test_restore_digest_mismatch(tmp_path):
    _write(tmp_path, 1, "X")
    with pytest.raises(ConfigError):
        restore_latest(tmp_path, digest=config_digest("other"))
    assert restore_latest(tmp_path, digest=config_digest("c")) is not None


def test_checkpoint_rejects_bad_factor_name(tmp_path):
    with pytest.raises(InputError):
        write_checkpoint(tmp_path, Checkpoint(1, "Q", np.zeros((1, 1), np.float32)))


def test_async_writer(tmp_path, rng):
    factors = [rng.random((20, 3)).astype(np.float32) for _ in range(6)]
    with CheckpointWriter(tmp_path, config_digest("w")) as w:
        for k, f in enumerate(factors):
            w.submit(k // 2, "XT"[k % 2], f)
            f[:] = -1  # caller may reuse its buffer right away
    names = [p.name for p in list_checkpoints(tmp_path)]
    assert len(names) == 6
    cp = restore_latest(tmp_path)
    assert (cp.iteration, cp.which) == (2, "T")
    assert cp.factor.min() >= 0
