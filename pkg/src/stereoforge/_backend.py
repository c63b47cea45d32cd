"""Numba / NumPy kernel selection.

Hot kernels ship in two builds: a numba ``@njit`` one and a pure-numpy one.
The active build is chosen per call from the ``STEREOFORGE_NUMBA``
environment variable:

* ``1`` / ``on``  -- force the numba build (error if numba is missing),
* ``0`` / ``off`` -- force the numpy fallback,
* unset / ``auto`` -- numba when importable, numpy otherwise.

``benchmarks/bench_kernels.py`` times the two builds against each other.
"""

import os

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - CI always has numba
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def numba_enabled() -> bool:
    """True when hot kernels should run their numba build."""
    flag = os.environ.get("STEREOFORGE_NUMBA", "auto").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return False
    if flag in ("1", "on", "true", "yes"):
        if not HAVE_NUMBA:
            raise RuntimeError("STEREOFORGE_NUMBA=1 but numba is not importable")
        return True
    return HAVE_NUMBA


__all__ = ["njit", "prange", "numba_enabled", "HAVE_NUMBA"]
