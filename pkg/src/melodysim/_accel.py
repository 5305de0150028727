"""Numba switch.

Hot loops are compiled with numba when it is importable and the environment
variable ``MELODYSIM_NO_NUMBA`` is unset (or ``0``).  Otherwise every kernel
falls back to its pure-numpy twin in :mod:`melodysim.kernels`.
"""
from __future__ import annotations

import functools
import os

_DISABLED = os.environ.get("MELODYSIM_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False
    _numba_njit = None

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, else an identity decorator.

    The decorated function is always compiled lazily, so importing the
    package never triggers compilation.
    """
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)

    if args and callable(args[0]):
        return args[0]

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*a, **kw):
            return fn(*a, **kw)

        return wrapper

    return deco


__all__ = ["njit", "USE_NUMBA", "NUMBA_AVAILABLE"]
