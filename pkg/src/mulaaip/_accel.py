"""Numba toggle.

Set ``MULAAIP_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""
import os

_FLAG = os.environ.get("MULAAIP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True, nogil=True)(func)
