"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``CMALAB_NUMBA=0`` in the environment to force the numpy path.  The
choice is read at call time so tests and the benchmark can flip it.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None


def numba_available():
    return numba is not None


def use_numba():
    flag = os.environ.get("CMALAB_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    return numba is not None


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or the identity when numba is missing."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
