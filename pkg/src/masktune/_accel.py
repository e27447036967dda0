"""Optional numba acceleration.

Set ``MASKTUNE_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""

import os

_DISABLED = os.environ.get("MASKTUNE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    import numba as _nb
except ImportError:  # pragma: no cover - depends on environment
    _nb = None

NUMBA_ENABLED = _nb is not None

njit_kwargs = {
    "nogil": True,
    "cache": False,
    # fastmath would reorder the purity arithmetic; both paths must agree bitwise
    "fastmath": False,
}


def njit(func):
    """Compile ``func`` with numba when available, else return it untouched."""
    if _nb is None:
        return func
    return _nb.njit(**njit_kwargs)(func)
