"""Backend selection for the numeric kernels.

Kernels in :mod:`drone_audition.kernels` exist twice: a numba ``@njit``
version and a pure-numpy version. The numba path is used when numba imports
and the environment variable ``DRONE_AUDITION_JIT`` is not set to ``0``.
"""

import os

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

_FALSY = {"0", "false", "no", "off"}

USE_JIT = HAS_NUMBA and os.environ.get("DRONE_AUDITION_JIT", "1").lower() not in _FALSY


def enable_jit():
    """Route kernel calls through the numba implementations."""
    global USE_JIT
    if not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    USE_JIT = True


def disable_jit():
    """Route kernel calls through the pure-numpy implementations."""
    global USE_JIT
    USE_JIT = False


def backend():
    return "numba" if USE_JIT else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAS_NUMBA:
        from numba import njit as _njit
        kwargs.setdefault("cache", True)
        return _njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
