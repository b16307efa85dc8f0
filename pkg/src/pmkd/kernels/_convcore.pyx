# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Reductions accumulate in float64 in a fixed, code-defined summation order
(independent of thread count: threads only split independent output
elements), so repeated runs are bit-identical. Stride-1 3-tap rows get
fused fast paths; everything else goes through the generic path.
"""

import numpy as np

from cython.parallel cimport prange


cdef inline Py_ssize_t _ow_lo(Py_ssize_t pw, Py_ssize_t kw, Py_ssize_t sw) noexcept nogil:
    # smallest ow >= 0 with ow*sw - pw + kw >= 0
    cdef Py_ssize_t d = pw - kw
    if d <= 0:
        return 0
    return (d + sw - 1) // sw


cdef inline Py_ssize_t _ow_hi(Py_ssize_t W, Py_ssize_t pw, Py_ssize_t kw,
                              Py_ssize_t sw, Py_ssize_t OW) noexcept nogil:
    # one past the largest ow with ow*sw - pw + kw <= W-1
    cdef Py_ssize_t t = W - 1 + pw - kw
    if t < 0:
        return 0
    cdef Py_ssize_t hi = t // sw + 1
    if hi > OW:
        return OW
    return hi


# --------------------------------------------------------------------------
# forward

cdef void _fwd_row_generic(double* orow, const float* xrow, const float* wrow,
                           Py_ssize_t KW, Py_ssize_t pw, Py_ssize_t sw,
                           Py_ssize_t W, Py_ssize_t OW) noexcept nogil:
    cdef Py_ssize_t kw, ow, lo, hi, base
    cdef double wv
    for kw in range(KW):
        wv = wrow[kw]
        lo = _ow_lo(pw, kw, sw)
        hi = _ow_hi(W, pw, kw, sw, OW)
        base = kw - pw
        for ow in range(lo, hi):
            orow[ow] += wv * <double>xrow[ow * sw + base]


cdef void _fwd_row_k3p1(double* orow, const float* xrow, const float* wrow,
                        Py_ssize_t OW) noexcept nogil:
    # KW=3, pw=1, sw=1, W=OW: fused taps, per-element order kw=0,1,2
    cdef Py_ssize_t ow
    cdef double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2]
    orow[0] += w1 * <double>xrow[0] + w2 * <double>xrow[1]
    for ow in range(1, OW - 1):
        orow[ow] += w0 * <double>xrow[ow - 1] + w1 * <double>xrow[ow] \
            + w2 * <double>xrow[ow + 1]
    if OW > 1:
        orow[OW - 1] += w0 * <double>xrow[OW - 2] + w1 * <double>xrow[OW - 1]


def conv2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                   bias, Py_ssize_t ph, Py_ssize_t pw,
                   Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * ph - KH) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - KW) // sw + 1

    out64 = np.zeros((N, Cout, OH, OW), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out64
    cdef const float[::1] b
    cdef bint has_b = bias is not None
    if has_b:
        b = bias
    cdef bint fused = (KW == 3 and pw == 1 and sw == 1 and W == OW and W >= 2)

    cdef Py_ssize_t n, co, ci, kh, oh, ow, ih
    cdef double bv
    cdef double* orow
    with nogil:
        for n in prange(N, schedule='static'):
            for co in range(Cout):
                bv = b[co] if has_b else 0.0
                if bv != 0.0:
                    for oh in range(OH):
                        orow = &o[n, co, oh, 0]
                        for ow in range(OW):
                            orow[ow] = bv
                for ci in range(Cin):
                    for kh in range(KH):
                        for oh in range(OH):
                            ih = oh * sh - ph + kh
                            if ih < 0 or ih >= H:
                                continue
                            if fused:
                                _fwd_row_k3p1(&o[n, co, oh, 0], &x[n, ci, ih, 0],
                                              &w[co, ci, kh, 0], OW)
                            else:
                                _fwd_row_generic(&o[n, co, oh, 0], &x[n, ci, ih, 0],
                                                 &w[co, ci, kh, 0], KW, pw, sw, W, OW)
    return out64.astype(np.float32)


# --------------------------------------------------------------------------
# input gradient

cdef void _igrad_row_gather_k3p1(double* drow, const float* grow,
                                 const float* wrow, Py_ssize_t W) noexcept nogil:
    # dx[iw] += sum_kw w[kw] * gy[iw - kw + 1]; KW=3, pw=1, sw=1, OW=W
    cdef Py_ssize_t iw
    cdef double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2]
    drow[0] += w0 * <double>grow[1] + w1 * <double>grow[0]
    for iw in range(1, W - 1):
        drow[iw] += w0 * <double>grow[iw + 1] + w1 * <double>grow[iw] \
            + w2 * <double>grow[iw - 1]
    if W > 1:
        drow[W - 1] += w1 * <double>grow[W - 1] + w2 * <double>grow[W - 2]


cdef void _igrad_row_generic(double* drow, const float* grow, const float* wrow,
                             Py_ssize_t KW, Py_ssize_t pw, Py_ssize_t sw,
                             Py_ssize_t W, Py_ssize_t OW) noexcept nogil:
    cdef Py_ssize_t kw, ow, lo, hi, base
    cdef double wv
    for kw in range(KW):
        wv = wrow[kw]
        lo = _ow_lo(pw, kw, sw)
        hi = _ow_hi(W, pw, kw, sw, OW)
        base = kw - pw
        for ow in range(lo, hi):
            drow[ow * sw + base] += wv * <double>grow[ow]


def conv2d_input_grad(const float[:, :, :, ::1] gy, const float[:, :, :, ::1] w,
                      Py_ssize_t H, Py_ssize_t W,
                      Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = gy.shape[0], Cout = gy.shape[1]
    cdef Py_ssize_t OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t Cin = w.shape[1], KH = w.shape[2], KW = w.shape[3]

    dx64 = np.zeros((N, Cin, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx64
    cdef bint fused = (KW == 3 and pw == 1 and sw == 1 and W == OW and W >= 2)

    cdef Py_ssize_t n, co, ci, kh, oh, ih
    with nogil:
        for n in prange(N, schedule='static'):
            for ci in range(Cin):
                for co in range(Cout):
                    for kh in range(KH):
                        for oh in range(OH):
                            ih = oh * sh - ph + kh
                            if ih < 0 or ih >= H:
                                continue
                            if fused:
                                _igrad_row_gather_k3p1(&dx[n, ci, ih, 0],
                                                       &gy[n, co, oh, 0],
                                                       &w[co, ci, kh, 0], W)
                            else:
                                _igrad_row_generic(&dx[n, ci, ih, 0],
                                                   &gy[n, co, oh, 0],
                                                   &w[co, ci, kh, 0],
                                                   KW, pw, sw, W, OW)
    return dx64.astype(np.float32)


# --------------------------------------------------------------------------
# weight gradient

cdef double _dot_lanes(const float* a, const float* b, Py_ssize_t n) noexcept nogil:
    # fixed 4-lane reduction: lanes combined (0+1)+(2+3), then the tail
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef Py_ssize_t i, n4 = 4 * (n // 4)
    for i in range(0, n4, 4):
        a0 += <double>a[i] * <double>b[i]
        a1 += <double>a[i + 1] * <double>b[i + 1]
        a2 += <double>a[i + 2] * <double>b[i + 2]
        a3 += <double>a[i + 3] * <double>b[i + 3]
    cdef double acc = (a0 + a1) + (a2 + a3)
    for i in range(n4, n):
        acc += <double>a[i] * <double>b[i]
    return acc


cdef double _dot_strided(const float* a, const float* b, Py_ssize_t n,
                         Py_ssize_t bstride) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        acc += <double>a[i] * <double>b[i * bstride]
    return acc


def conv2d_weight_grad(const float[:, :, :, ::1] gy, const float[:, :, :, ::1] x,
                       Py_ssize_t KH, Py_ssize_t KW,
                       Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]

    dw64 = np.zeros((Cout, Cin, KH, KW), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw64

    cdef Py_ssize_t n, co, ci, kh, kw, oh, ih, base, lo, hi
    cdef double acc
    with nogil:
        for co in prange(Cout, schedule='static'):
            for n in range(N):
                for ci in range(Cin):
                    for kh in range(KH):
                        for kw in range(KW):
                            lo = _ow_lo(pw, kw, sw)
                            hi = _ow_hi(W, pw, kw, sw, OW)
                            base = kw - pw
                            acc = 0.0
                            for oh in range(OH):
                                ih = oh * sh - ph + kh
                                if ih < 0 or ih >= H:
                                    continue
                                if sw == 1:
                                    acc = acc + _dot_lanes(&gy[n, co, oh, lo],
                                                           &x[n, ci, ih, lo + base],
                                                           hi - lo)
                                else:
                                    acc = acc + _dot_strided(&gy[n, co, oh, lo],
                                                             &x[n, ci, ih, lo * sw + base],
                                                             hi - lo, sw)
                            dw[co, ci, kh, kw] += acc
    return dw64.astype(np.float32)


def fnv1a64(const unsigned char[::1] data):
    """64-bit FNV-1a over a byte buffer."""
    cdef unsigned long long h = 14695981039346656037ULL
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h = (h ^ <unsigned long long>data[i]) * 1099511628211ULL
    return h
