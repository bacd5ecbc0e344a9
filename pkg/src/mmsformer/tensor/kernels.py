"""Kernel backend selection.

The compiled extension is used when it imports; set ``MMSFORMER_KERNELS=python``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MMSFORMER_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
dwconv_forward = _impl.dwconv_forward
dwconv_backward = _impl.dwconv_backward
upsample_forward = _impl.upsample_forward
upsample_backward = _impl.upsample_backward
