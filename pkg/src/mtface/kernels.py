"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy fallback.
Set ``MTFACE_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MTFACE_PURE", "") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

iou_matrix = _impl.iou_matrix
nms = _impl.nms
greedy_match = _impl.greedy_match
smooth_l1 = _impl.smooth_l1


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
