"""Pure numpy convolution kernels, used when the compiled extension is absent.

Matches the compiled backend's contract: float32 in/out, float64
accumulation (BLAS dgemm via tensordot), deterministic for a fixed
input shape.
"""

from __future__ import annotations

import numpy as np


def _out_extent(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            oh: int, ow: int) -> np.ndarray:
    """[N, Cin, Hp, Wp] padded input -> float64 [N, Cin, kh, kw, oh, ow]."""
    n, cin = xp.shape[:2]
    cols = np.empty((n, cin, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols


def conv2d_forward(x, w, bias, ph, pw, sh, sw):
    cout, _, kh, kw = w.shape
    oh = _out_extent(x.shape[2], kh, ph, sh)
    ow = _out_extent(x.shape[3], kw, pw, sw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    out = np.tensordot(w.astype(np.float64), cols, axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.astype(np.float64)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def conv2d_input_grad(gy, w, h, w_in, ph, pw, sh, sw):
    n = gy.shape[0]
    _, cin, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    # d/dcols then scatter-add back through the im2col windows
    dcols = np.tensordot(gy.astype(np.float64), w.astype(np.float64),
                         axes=([1], [0]))  # [N, oh, ow, Cin, kh, kw]
    dxp = np.zeros((n, cin, h + 2 * ph, w_in + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, ph:ph + h, pw:pw + w_in]
    return np.ascontiguousarray(dx, dtype=np.float32)


def conv2d_weight_grad(gy, x, kh, kw, ph, pw, sh, sw):
    oh, ow = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    dw = np.tensordot(gy.astype(np.float64), cols,
                      axes=([0, 2, 3], [0, 4, 5]))  # [Cout, Cin, kh, kw]
    return np.ascontiguousarray(dw, dtype=np.float32)


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data) -> int:
    h = _FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h
