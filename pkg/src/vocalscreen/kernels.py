"""Backend selection for the hot kernels.

The compiled extension is used when it has been built; otherwise, or when
``VOCALSCREEN_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("VOCALSCREEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback

smo_solve = _impl.smo_solve
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
col2im = _impl.col2im
im2col = _impl.im2col

__all__ = ["BACKEND", "smo_solve", "maxpool2x2_forward", "maxpool2x2_backward", "col2im",
           "im2col"]
