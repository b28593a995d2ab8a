"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it is importable; otherwise
the numpy versions in ``_fallback`` take over. Set ``SPLITFED_PURE_PYTHON=1``
to force the fallback.
"""
import os

from splitfed import _fallback

if os.environ.get("SPLITFED_PURE_PYTHON", "") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from splitfed import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
topk_indices = _impl.topk_indices
