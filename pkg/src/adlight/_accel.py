"""Optional numba acceleration for the hot simulation loops.

Set ``ADLIGHT_NUMBA=0`` to run the identical kernels as plain Python over
numpy arrays (slow, but dependency-free and handy for debugging).
"""
import os

_flag = os.environ.get("ADLIGHT_NUMBA", "1").strip().lower()

try:
    if _flag in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by ADLIGHT_NUMBA")
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False


def kernel(fn):
    """Compile ``fn`` with numba when enabled; otherwise return it untouched.

    The undecorated Python function stays reachable as ``fn.py_func`` in both
    modes so callers (and the benchmark) can pick a path explicitly.
    """
    if NUMBA_ENABLED:
        compiled = _njit(cache=True, nogil=True)(fn)
        return compiled
    fn.py_func = fn
    return fn
