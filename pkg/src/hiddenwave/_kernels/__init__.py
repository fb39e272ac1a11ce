"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
HIDDENWAVE_PURE_PYTHON=1 forces the NumPy fallback (used by the parity
tests and the benchmark).
"""

import os

from . import _ref

if os.environ.get("HIDDENWAVE_PURE_PYTHON") == "1":
    _impl = _ref
    BACKEND = "numpy"
else:
    try:
        from . import _fastkern as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
        BACKEND = "numpy"

sin_arr = _impl.sin_arr
cos_arr = _impl.cos_arr
correlate3x3_valid = _impl.correlate3x3_valid

__all__ = ["BACKEND", "sin_arr", "cos_arr", "correlate3x3_valid", "_ref"]
