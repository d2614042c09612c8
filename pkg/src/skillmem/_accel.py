"""Optional numba acceleration.

Kernels in :mod:`skillmem.kernels` come in two flavours: a loop version
compiled with ``numba.njit`` and a vectorised numpy version.  The numba path
is used when numba imports cleanly and ``SKILLMEM_NUMBA`` is not set to a
false-ish value (``0``, ``false``, ``no``, ``off``).
"""
from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

_FALSY = {"0", "false", "no", "off"}

USE_NUMBA = HAVE_NUMBA and os.environ.get("SKILLMEM_NUMBA", "1").strip().lower() not in _FALSY


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
