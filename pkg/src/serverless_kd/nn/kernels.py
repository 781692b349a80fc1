"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the NumPy
fallback. Set ``SERVERLESS_KD_KERNELS=python`` to force the fallback.
"""

import os

from . import _pykernels

python_kernels = _pykernels
compiled_kernels = None

if os.environ.get("SERVERLESS_KD_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_kernels  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on the build
        compiled_kernels = None

_impl = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "cython" if _impl is compiled_kernels else "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
