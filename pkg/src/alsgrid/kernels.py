"""Kernel dispatch.

The compiled ``_core`` extension is used when importable; otherwise the
numpy fallback. ``ALSGRID_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

try:
    if os.environ.get("ALSGRID_PURE_PYTHON"):
        raise ImportError("fallback forced by environment")
    from . import _core as _backend

    BACKEND = "compiled"
except ImportError:
    _backend = _fallback
    BACKEND = "python"


def backends():
    """Mapping of available backend name to module."""
    out = {"python": _fallback}
    try:
        from . import _core

        out["compiled"] = _core
    except ImportError:
        pass
    return out


def hermitian_rows(*args):
    return _backend.hermitian_rows(*args)


def solve_rows(*args):
    return _backend.solve_rows(*args)
