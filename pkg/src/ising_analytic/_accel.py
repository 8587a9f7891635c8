"""Backend switch for the numeric kernels.

Kernels are written once as plain Python loops over numpy arrays and
compiled with ``numba.njit`` unless ``ISING_ANALYTIC_PURE_NUMPY`` is set to a
truthy value (or numba is not importable), in which case the very same
functions run uninterpreted.  The pure path is slow but keeps every result
bit-identical, which the backend tests rely on.
"""
import os

_FLAG = "ISING_ANALYTIC_PURE_NUMPY"


def _numba_requested():
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when the compiled backend is active, identity otherwise."""
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        fn = args[0]
        return _numba.njit(cache=True)(fn) if USE_NUMBA else fn

    def deco(fn):
        if not USE_NUMBA:
            return fn
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)(fn)

    return deco


def py_func(kernel):
    """The uncompiled body of a kernel (itself if already pure)."""
    return getattr(kernel, "py_func", kernel)
