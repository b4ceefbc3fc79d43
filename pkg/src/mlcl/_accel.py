"""Selects numba-compiled kernels or their pure-numpy twins.

Set ``MLCL_DISABLE_NUMBA=1`` before import to force the numpy path. If numba
cannot be imported the numpy path is used silently.
"""

import os

_FLAG = os.environ.get("MLCL_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, else identity."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)


def pick(jit_fn, numpy_fn):
    return jit_fn if USE_NUMBA else numpy_fn
