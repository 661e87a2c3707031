"""Numba switch shared by every hot kernel.

Kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``SPINECOMPLETE_NUMBA=0`` is set in the environment
(or numba is not importable).  Callers go through dispatch helpers that pick
either the compiled loop or a vectorised numpy implementation, so both paths
stay testable in the same process via :func:`use_numba`.
"""
from __future__ import annotations

import contextlib
import logging
import os

logger = logging.getLogger(__name__)

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_ENABLED = HAVE_NUMBA and os.environ.get("SPINECOMPLETE_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` lazily; return it untouched if numba is missing."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def numba_enabled() -> bool:
    return _ENABLED


def set_numba(enabled: bool) -> None:
    global _ENABLED
    if enabled and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _ENABLED = bool(enabled)


@contextlib.contextmanager
def use_numba(enabled: bool):
    """Temporarily force one backend, e.g. in tests and benchmarks."""
    previous = _ENABLED
    set_numba(enabled)
    try:
        yield
    finally:
        set_numba(previous)
