"""Box-kernel backend selection.

Imports the compiled Cython kernels when the extension is built, else
falls back to the numpy reference implementation. Setting the environment
variable ``MITODET_PURE_PYTHON=1`` forces the fallback (useful for
debugging and for the backend-comparison benchmark).
"""

import os

from . import python_ref

if os.environ.get("MITODET_PURE_PYTHON", "") not in ("", "0"):
    _impl = python_ref
else:
    try:
        from . import _box_kernels as _impl
    except ImportError:
        _impl = python_ref

BACKEND = _impl.BACKEND_NAME
iou_matrix = _impl.iou_matrix
nms = _impl.nms

__all__ = ["BACKEND", "iou_matrix", "nms", "python_ref"]
