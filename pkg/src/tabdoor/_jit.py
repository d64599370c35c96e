"""Numba switch.

Set ``TABDOOR_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time; tests flip ``use_numba`` through :func:`set_backend`.
"""
import os

_DISABLED = os.environ.get("TABDOOR_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _numba_njit = None
    HAVE_NUMBA = False

JIT_OPTIONS = {"nogil": True, "cache": True}

use_numba = HAVE_NUMBA


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if _numba_njit is None:
        return func
    return _numba_njit(**JIT_OPTIONS)(func)


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels at runtime; returns the previous name."""
    global use_numba
    previous = "numba" if use_numba else "numpy"
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        use_numba = True
    elif name == "numpy":
        use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def backend():
    return "numba" if use_numba else "numpy"
