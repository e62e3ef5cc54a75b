"""Kernel dispatch: compiled extension when importable, pure Python otherwise.

Set ``LLMSCHED_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("LLMSCHED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

interp1 = _impl.interp1
interp2 = _impl.interp2
flow_shop = _impl.flow_shop
cyclic_pipeline = _impl.cyclic_pipeline

__all__ = ["BACKEND", "interp1", "interp2", "flow_shop", "cyclic_pipeline"]
