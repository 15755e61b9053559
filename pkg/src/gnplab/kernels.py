"""Hot-loop kernel dispatch.

The compiled extension ``gnplab._kernels`` is used when it imports; otherwise
the numpy reference in ``gnplab._kernels_py`` is used.  Set
``GNPLAB_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` names the
active implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("GNPLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

im2col = _impl.im2col
col2im = _impl.col2im
avgpool2_forward = _impl.avgpool2_forward
avgpool2_backward = _impl.avgpool2_backward
sign_step_project = _impl.sign_step_project

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "avgpool2_forward",
    "avgpool2_backward",
    "sign_step_project",
]
