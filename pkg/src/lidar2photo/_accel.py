"""Optional numba acceleration.

Kernels are written once as plain Python loops over numpy arrays.  When numba
is importable and ``L2P_NUMBA`` is not ``0`` they are compiled with ``njit``;
otherwise callers get the vectorized numpy path registered next to each kernel.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("L2P_NUMBA", "1") != "0"


def njit(func):
    """Compile ``func`` with numba if available, else return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, error_model="numpy")(func)


def select(jit_impl, numpy_impl):
    """Pick the active backend for a kernel pair."""
    return jit_impl if USE_NUMBA else numpy_impl


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
