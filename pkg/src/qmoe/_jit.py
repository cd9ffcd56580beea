"""Backend switch for the compiled kernels.

Set ``QMOE_BACKEND=numpy`` to force the pure-numpy implementations even when
numba is importable. Any other value (or unset) uses numba when available.
"""

import os
import warnings

_requested = os.environ.get("QMOE_BACKEND", "numba").strip().lower()

try:
    if _requested == "numpy":
        raise ImportError("numba disabled by QMOE_BACKEND")
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:
    _nb = None
    HAVE_NUMBA = False
    if _requested != "numpy":
        warnings.warn("numba not importable; using numpy kernels", RuntimeWarning)

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _nb.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func
