"""Numba dispatch.

Hot kernels are written twice: a numba ``@njit`` loop and a vectorised numpy
version. The numba path is used when numba imports and the environment
variable ``SURROGATE_DA_DISABLE_NUMBA`` is unset or ``0``. Both paths are
always importable so tests and benchmarks can compare them directly.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "SURROGATE_DA_DISABLE_NUMBA"


def numba_enabled():
    flag = os.environ.get(ENV_FLAG, "0").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or the identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def select(numba_impl, numpy_impl, backend=None):
    """Pick an implementation. ``backend`` is ``None``, ``"numba"`` or ``"numpy"``."""
    if backend is None:
        backend = "numba" if numba_enabled() else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return numba_impl
    if backend == "numpy":
        return numpy_impl
    raise ValueError(f"unknown backend {backend!r}")
