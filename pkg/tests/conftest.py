import numpy as np
import pytest

from alsgrid import kernels
from alsgrid.sparse import csr_from_arrays


def random_csr(rng, m, n, nnz=None, density=None, low=1.0, high=5.0):
    """Random matrix with unique coordinates drawn without replacement."""
    if nnz is None:
        nnz = int(round((density or 0.2) * m * n))
    flat = rng.choice(m * n, size=min(nnz, m * n), replace=False)
    rows, cols = np.divmod(flat, n)
    vals = rng.uniform(low, high, size=len(flat))
    return csr_from_arrays(m, n, rows, cols, vals)


def random_factor(rng, rows, f):
    return rng.random((rows, f), dtype=np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.backends()))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    monkeypatch.setattr(kernels, "_backend", kernels.backends()[request.param])
    return request.param


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; lines are also
    repeated in the terminal summary."""

    def record(number, title, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {status}  {title}: {detail}"
        lines = request.config.stash.setdefault(_VERDICTS, [])
        lines.append(line)
        print(line)
        return ok

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
