"""Numba on/off switch.

Set ``SUBSETLIFT_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. The choice is fixed for the lifetime of the process.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("SUBSETLIFT_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    The compiled and uncompiled objects are both callable with the same
    signature, so tests can exercise the numba kernels directly even when
    the dispatcher has been switched to numpy.
    """

    def decorator(func):
        if HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
