"""Numba acceleration layer with a pure-numpy fallback.

Every hot kernel in this package is written as plain numpy code and wrapped
with :func:`jit_kernel`.  By default the wrapper compiles with numba's
``@njit(nogil=True)`` so kernels run at native speed and release the GIL
(the corridor optimizations run on a thread pool).  Setting the environment
variable ``HAIRPIN_DISABLE_NUMBA=1`` before import skips compilation and runs
the same source as ordinary numpy code.  ``benchmarks/bench_backends.py``
compares the two paths.
"""

from __future__ import annotations

import os

DISABLE_ENV = "HAIRPIN_DISABLE_NUMBA"

NUMBA_ENABLED = os.environ.get(DISABLE_ENV, "0") not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a hard dep, guard anyway
        NUMBA_ENABLED = False

if NUMBA_ENABLED:

    def jit_kernel(func):
        """Compile a hot kernel with numba (nogil, cached across processes)."""
        return _njit(cache=True, nogil=True, fastmath=False)(func)

else:

    def jit_kernel(func):
        """Fallback: run the kernel as plain numpy code."""
        return func


def using_numba() -> bool:
    """True when kernels are numba-compiled in this process."""
    return NUMBA_ENABLED
