"""Dense float32 tensors with tape-based reverse-mode autodiff.

Design rules, applied uniformly:

* storage is float32; every reduction accumulates in float64 in a fixed
  summation order, so training replays are bit-identical for a fixed
  seed and config;
* a ``Tape`` records executed ops in execution order (which is already a
  topological order); ``backward`` walks it once in reverse;
* no implicit broadcasting beyond bias-add and the batchnorm affine.

Ops only record onto the ambient tape installed by ``record_on``; a
forward pass outside any tape (teacher roles, evaluation) is detached.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """A tensor argument has an incompatible shape."""


CHECK_FINITE = os.environ.get("PMKD_CHECK_FINITE", "0") == "1"


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel extents, zero padding and stride of one convolution."""

    kernel_h: int
    kernel_w: int
    pad_h: int = 0
    pad_w: int = 0
    stride_h: int = 1
    stride_w: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"kernel extents must be positive, got "
                             f"{self.kernel_h}x{self.kernel_w}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("padding must be non-negative")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ValueError("stride must be positive")

    @classmethod
    def square3(cls, stride: int = 1) -> "ConvGeometry":
        return cls(3, 3, 1, 1, stride, stride)

    @classmethod
    def row3(cls, stride: int = 1) -> "ConvGeometry":
        return cls(1, 3, 0, 1, stride, stride)

    @classmethod
    def col3(cls, stride: int = 1) -> "ConvGeometry":
        return cls(3, 1, 1, 0, stride, stride)

    @classmethod
    def point(cls, stride: int = 1) -> "ConvGeometry":
        return cls(1, 1, 0, 0, stride, stride)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent not positive: input {h}x{w} with "
                f"kernel {self.kernel_h}x{self.kernel_w}, pad "
                f"({self.pad_h},{self.pad_w}), stride "
                f"({self.stride_h},{self.stride_w})")
        return oh, ow


class Tensor:
    """A float32 array of rank <= 4 plus its gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4 not supported")
        if arr.size == 0:
            raise ShapeError("zero-size tensors not supported")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{name} contains NaN or Inf")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic used for loss composition and ensemble averaging
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return ew_mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))


class Tape:
    """Ordered record of executed differentiable ops (a topological order)."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list = []

    def record(self, backward_fn) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)


_ACTIVE_TAPE: Tape | None = None


@contextmanager
def record_on(tape: Tape):
    """Install `tape` as the recording target for ops run in the block."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def _tracking(*tensors: Tensor) -> bool:
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _finish(out: Tensor, name: str) -> Tensor:
    if CHECK_FINITE:
        out.assert_finite(name)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Backpropagate from a scalar loss through every recorded op.

    Parameters that never reached the loss keep ``grad is None``, which
    consumers read as zero.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._ops):
        fn()


# ---------------------------------------------------------------------------
# convolution / linear / normalization

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, g: ConvGeometry) -> Tensor:
    """Cross-correlation with zero padding, NCHW."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: x must be rank 4, got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: w must be rank 4, got {w.shape}")
    if w.shape[2] != g.kernel_h or w.shape[3] != g.kernel_w:
        raise ShapeError(f"conv2d: w kernel {w.shape[2]}x{w.shape[3]} does not "
                         f"match geometry {g.kernel_h}x{g.kernel_w} (axes 2,3)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x channels {x.shape[1]} != w in-channels "
                         f"{w.shape[1]} (axis 1)")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},) (axis 0)")
    h, w_in = x.shape[2], x.shape[3]
    g.out_hw(h, w_in)

    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    bd = None if b is None else np.ascontiguousarray(b.data)
    out = Tensor(kernels.conv2d_forward(xd, wd, bd, g.pad_h, g.pad_w,
                                        g.stride_h, g.stride_w))
    if _tracking(x, w) or (b is not None and _tracking(b)):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            gy = np.ascontiguousarray(gy)
            if x.requires_grad:
                _accum(x, kernels.conv2d_input_grad(
                    gy, wd, h, w_in, g.pad_h, g.pad_w, g.stride_h, g.stride_w))
            if w.requires_grad:
                _accum(w, kernels.conv2d_weight_grad(
                    gy, xd, g.kernel_h, g.kernel_w, g.pad_h, g.pad_w,
                    g.stride_h, g.stride_w))
            if b is not None and b.requires_grad:
                _accum(b, gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return _finish(out, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b for x [N,F], w [K,F], b [K]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear: need rank-2 x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x features {x.shape[1]} != w features "
                         f"{w.shape[1]} (axis 1)")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    out = Tensor((x64 @ w64.T + b.data.astype(np.float64)).astype(np.float32))
    if _tracking(x, w, b):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            g64 = gy.astype(np.float64)
            if x.requires_grad:
                _accum(x, (g64 @ w64).astype(np.float32))
            if w.requires_grad:
                _accum(w, (g64.T @ x64).astype(np.float32))
            if b.requires_grad:
                _accum(b, g64.sum(axis=0).astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return _finish(out, "linear")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by the biased batch statistics and updates the
    running buffers in place (unbiased variance, conventional momentum
    form). Eval mode applies the running-stat affine.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: x must be rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError("batchnorm2d: empty batch")
    for name, t in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {t.shape} != ({c},)")

    if training:
        cnt = n * h * w
        mean64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var64 = np.square(x.data.astype(np.float64) - mean64[None, :, None, None]
                          ).mean(axis=(0, 2, 3))
        invstd = (1.0 / np.sqrt(var64 + eps)).astype(np.float32)
        mean = mean64.astype(np.float32)
        unbiased = var64 * (cnt / (cnt - 1)) if cnt > 1 else var64
        running_mean *= np.float32(1.0 - momentum)
        running_mean += np.float32(momentum) * mean64.astype(np.float32)
        running_var *= np.float32(1.0 - momentum)
        running_var += np.float32(momentum) * unbiased.astype(np.float32)
    else:
        invstd = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(np.float32)
        mean = running_mean

    xhat = (x.data - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat
                 + beta.data[None, :, None, None])
    if _tracking(x, gamma, beta):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            axes = (0, 2, 3)
            if gamma.requires_grad:
                _accum(gamma, (gy * xhat).sum(axis=axes, dtype=np.float64)
                       .astype(np.float32))
            if beta.requires_grad:
                _accum(beta, gy.sum(axis=axes, dtype=np.float64).astype(np.float32))
            if x.requires_grad:
                gs = gamma.data[None, :, None, None] * invstd[None, :, None, None]
                if training:
                    cnt = n * h * w
                    dxhat = gy * gamma.data[None, :, None, None]
                    s1 = dxhat.sum(axis=axes, dtype=np.float64)
                    s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64)
                    dx = (invstd[None, :, None, None].astype(np.float64) / cnt) * (
                        cnt * dxhat
                        - s1[None, :, None, None]
                        - xhat * s2[None, :, None, None])
                    _accum(x, dx.astype(np.float32))
                else:
                    _accum(x, gy * gs)

        _ACTIVE_TAPE.record(_bw)
    return _finish(out, "batchnorm2d")


# ---------------------------------------------------------------------------
# activations and pooling

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracking(x):
        out.requires_grad = True
        mask = x.data > 0

        def _bw():
            if out.grad is not None:
                _accum(x, out.grad * mask)

        _ACTIVE_TAPE.record(_bw)
    return out


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the lowest-index argmax."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2: x must be rank 4, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2: extents must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(n, c, h // 2, w // 2, 4)
    amax = np.argmax(win, axis=-1)  # first max = lowest flattened index
    out = Tensor(np.take_along_axis(win, amax[..., None], axis=-1)[..., 0])
    if _tracking(x):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            gwin = np.zeros_like(win)
            np.put_along_axis(gwin, amax[..., None], gy[..., None], axis=-1)
            gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                .reshape(n, c, h, w)
            _accum(x, gx)

        _ACTIVE_TAPE.record(_bw)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: x must be rank 4, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32))
    if _tracking(x):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            _accum(x, np.broadcast_to((gy / (h * w))[:, :, None, None],
                                      x.shape).astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return out


# ---------------------------------------------------------------------------
# classification losses

def _log_softmax64(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = logits.astype(np.float64) / tau
    z -= z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_temperature(l: Tensor, tau: float) -> Tensor:
    """Row-wise softmax of l/tau."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if l.data.ndim != 2:
        raise ShapeError(f"softmax_temperature: need [N,K] logits, got {l.shape}")
    p64 = np.exp(_log_softmax64(l.data, tau))
    out = Tensor(p64.astype(np.float32))
    if _tracking(l):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            g64 = gy.astype(np.float64)
            dot = (g64 * p64).sum(axis=1, keepdims=True)
            _accum(l, ((p64 * (g64 - dot)) / tau).astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return out


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[y]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: need [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {y.shape} != ({n},)")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    logp = _log_softmax64(logits.data)
    out = Tensor(np.float32(-logp[np.arange(n), y].mean()))
    if _tracking(logits):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            d = np.exp(logp)
            d[np.arange(n), y] -= 1.0
            _accum(logits, (float(gy) * d / n).astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return out


def kl_div_temperature(teacher_logits, student_logits: Tensor, tau: float,
                       scale_by_tau_sq: bool = True) -> Tensor:
    """Batch-mean KL(softmax(t/tau) || softmax(s/tau)).

    The teacher side is always treated as a constant; gradient flows to
    the student logits only. With ``scale_by_tau_sq`` the loss (and so
    the gradient) is multiplied by tau^2, keeping the soft-target
    gradient magnitude roughly temperature-independent.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) \
        else np.asarray(teacher_logits, dtype=np.float32)
    if t_data.shape != student_logits.shape:
        raise ShapeError(f"kl_div: teacher {t_data.shape} != student "
                         f"{student_logits.shape}")
    n = t_data.shape[0]
    logp_t = _log_softmax64(t_data, tau)
    p_t = np.exp(logp_t)
    logp_s = _log_softmax64(student_logits.data, tau)
    scale = tau * tau if scale_by_tau_sq else 1.0
    loss = scale * float((p_t * (logp_t - logp_s)).sum(axis=1).mean())
    out = Tensor(np.float32(loss))
    if _tracking(student_logits):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            p_s = np.exp(logp_s)
            d = float(gy) * scale * (p_s - p_t) / (n * tau)
            _accum(student_logits, d.astype(np.float32))

        _ACTIVE_TAPE.record(_bw)
    return _finish(out, "kl_div_temperature")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff64 = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Tensor(np.float32(np.square(diff64).mean()))
    if _tracking(a, b):
        out.requires_grad = True
        coeff = 2.0 / a.size

        def _bw():
            gy = out.grad
            if gy is None:
                return
            d = (float(gy) * coeff * diff64).astype(np.float32)
            if a.requires_grad:
                _accum(a, d)
            if b.requires_grad:
                _accum(b, -d)

        _ACTIVE_TAPE.record(_bw)
    return out


# ---------------------------------------------------------------------------
# elementwise composition

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if _tracking(a, b):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            if a.requires_grad:
                _accum(a, gy)
            if b.requires_grad:
                _accum(b, gy)

        _ACTIVE_TAPE.record(_bw)
    return out


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"ew_mul: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if _tracking(a, b):
        out.requires_grad = True

        def _bw():
            gy = out.grad
            if gy is None:
                return
            if a.requires_grad:
                _accum(a, gy * b.data)
            if b.requires_grad:
                _accum(b, gy * a.data)

        _ACTIVE_TAPE.record(_bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * np.float32(c))
    if _tracking(a):
        out.requires_grad = True

        def _bw():
            if out.grad is not None:
                _accum(a, out.grad * np.float32(c))

        _ACTIVE_TAPE.record(_bw)
    return out


def ln(x: Tensor) -> Tensor:
    """Elementwise natural log (inputs must be positive)."""
    if np.any(x.data <= 0):
        raise ValueError("ln requires positive inputs")
    out = Tensor(np.log(x.data))
    if _tracking(x):
        out.requires_grad = True

        def _bw():
            if out.grad is not None:
                _accum(x, out.grad / x.data)

        _ACTIVE_TAPE.record(_bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = Tensor(np.float32(x.data.sum(dtype=np.float64)))
    if _tracking(x):
        out.requires_grad = True

        def _bw():
            if out.grad is not None:
                _accum(x, np.full(x.shape, float(out.grad), dtype=np.float32))

        _ACTIVE_TAPE.record(_bw)
    return out
