"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise the numpy
implementation takes over. Set ``SPLITFED_BACKEND=python`` to force the
fallback. Both backends produce bitwise-identical results.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_forced = os.environ.get("SPLITFED_BACKEND", "").lower()

_compiled = None
if _forced != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _forced == "compiled":
            raise

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]


def get_backend(name: str | None = None):
    """Kernel module by name; ``None`` means the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def im2col3x3(x):
    return _impl.im2col3x3(np.ascontiguousarray(x))


def col2im3x3(cols, shape):
    return _impl.col2im3x3(np.ascontiguousarray(cols), tuple(shape))


def maxpool2x2(x):
    return _impl.maxpool2x2(np.ascontiguousarray(x))


def maxpool2x2_backward(gy, arg, shape):
    return _impl.maxpool2x2_backward(np.ascontiguousarray(gy), np.ascontiguousarray(arg), tuple(shape))
