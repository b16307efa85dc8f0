"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy backend is
the fallback. Set PMKD_KERNELS=numpy or PMKD_KERNELS=compiled to force a
backend (forcing `compiled` raises if the extension was not built).
"""

from __future__ import annotations

import os

from . import numpy_backend

_requested = os.environ.get("PMKD_KERNELS", "auto").strip().lower()

_compiled = None
if _requested in ("auto", "compiled", "cython"):
    try:
        from . import _convcore as _compiled
    except ImportError:
        if _requested != "auto":
            raise ImportError(
                "PMKD_KERNELS=compiled but the pmkd.kernels._convcore "
                "extension is not built (pip install -e . rebuilds it)"
            )
elif _requested not in ("numpy", "python"):
    raise ValueError(f"unknown PMKD_KERNELS value: {_requested!r}")

_impl = _compiled if _compiled is not None else numpy_backend


def backend_name() -> str:
    return "compiled" if _impl is not numpy_backend else "numpy"


def conv2d_forward(x, w, bias, ph, pw, sh, sw):
    return _impl.conv2d_forward(x, w, bias, ph, pw, sh, sw)


def conv2d_input_grad(gy, w, h, w_in, ph, pw, sh, sw):
    return _impl.conv2d_input_grad(gy, w, h, w_in, ph, pw, sh, sw)


def conv2d_weight_grad(gy, x, kh, kw, ph, pw, sh, sw):
    return _impl.conv2d_weight_grad(gy, x, kh, kw, ph, pw, sh, sw)


def fnv1a64(data) -> int:
    return int(_impl.fnv1a64(data))
