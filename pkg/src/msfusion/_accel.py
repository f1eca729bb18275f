"""Optional numba acceleration.

Hot kernels are written twice: a loop version compiled with ``njit`` and a
vectorized numpy version. Setting ``MSFUSION_DISABLE_NUMBA=1`` (or running
without numba installed) routes every dispatcher to the numpy path.
"""

import os
import warnings

_FLAG = os.environ.get("MSFUSION_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG in {"1", "true", "yes", "on"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    if not DISABLED_BY_ENV:
        warnings.warn("numba not found; falling back to numpy kernels.")

USE_NUMBA = numba is not None and not DISABLED_BY_ENV


def njit(func):
    """Compile ``func`` in nopython mode when numba is enabled.

    The returned object is the original function otherwise, so loop kernels
    stay importable (and testable, slowly) on the fallback path.
    """
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend():
    return "numba" if USE_NUMBA else "numpy"
