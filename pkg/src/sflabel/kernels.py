"""Box kernels, compiled when the extension is built, numpy otherwise.

Set ``SFLABEL_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SFLABEL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

soft_membership = _impl.soft_membership
soft_membership_grad = _impl.soft_membership_grad
points_in_boxes = _impl.points_in_boxes
nearest_center_assignment = _impl.nearest_center_assignment

__all__ = [
    "BACKEND",
    "soft_membership",
    "soft_membership_grad",
    "points_in_boxes",
    "nearest_center_assignment",
]
