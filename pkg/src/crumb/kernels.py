"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is used.  Set ``CRUMB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

if os.environ.get("CRUMB_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

normalized_blocks = _impl.normalized_blocks
nearest_blocks = _impl.nearest_blocks
scatter_add_rows = _impl.scatter_add_rows
im2col = _impl.im2col
col2im = _impl.col2im


def backends():
    """Map of available backend name -> kernel module."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found
