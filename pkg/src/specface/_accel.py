"""Numba availability switch.

Set ``SPECFACE_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""

import os


def _noop_jit(*args, **kwargs):
    """Stand-in for ``numba.njit`` that returns the function untouched."""
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


def _env_disabled():
    return os.environ.get("SPECFACE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and not _env_disabled()

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
