"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``GROUPLANE_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GROUPLANE_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
splat_forward = _impl.splat_forward
splat_backward = _impl.splat_backward
solve_lap = _impl.solve_lap

__all__ = ["BACKEND", "im2col", "col2im", "splat_forward", "splat_backward", "solve_lap"]
