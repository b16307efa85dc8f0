"""Single-row streaming inference for row-filter students.

Because every streamable conv has kernel height 1, the whole network is
row-synchronous: one pushed input row produces at most one row per
layer, all within the same push (vertical stride just skips pushes).
Live activation memory is therefore one row buffer per planned unit and
never a full frame; the classifier keeps only a running channel sum.

Batchnorm is folded into the preceding conv where one exists; a
batchnorm with no conv in front (pre-activation blocks, final norms)
runs as a standalone per-channel affine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .models import (
    BatchNorm,
    Conv,
    GlobalAvgPool,
    Linear,
    MaxPool2x2,
    Model,
    PreactBlock,
    ReLU,
    ResidualBlock,
)


class NotStreamableError(ValueError):
    """The model cannot run row-by-row (tall kernels or pooling)."""


def fold_batchnorm(conv_w, conv_b, gamma, beta, running_mean, running_var,
                   eps) -> tuple[np.ndarray, np.ndarray]:
    """Merge eval-mode batchnorm into conv weights and bias.

    w' = w * gamma/sqrt(var+eps) per output channel,
    b' = (b - mean) * gamma/sqrt(var+eps) + beta.
    """
    g64 = np.asarray(gamma, np.float64)
    inv = g64 / np.sqrt(np.asarray(running_var, np.float64) + eps)
    w64 = np.asarray(conv_w, np.float64) * inv[:, None, None, None]
    b0 = np.zeros(len(gamma)) if conv_b is None else np.asarray(conv_b, np.float64)
    b64 = (b0 - np.asarray(running_mean, np.float64)) * inv \
        + np.asarray(beta, np.float64)
    return w64.astype(np.float32), b64.astype(np.float32)


@dataclass
class FoldedConv:
    """One streaming conv unit: folded weights plus an activation tag."""

    name: str
    w: np.ndarray  # [Cout, Cin, 1, KW], float32
    b: np.ndarray  # [Cout]
    stride_h: int
    stride_w: int
    pad_w: int
    relu_after: bool
    in_width: int
    out_width: int

    @property
    def out_ch(self) -> int:
        return self.w.shape[0]

    def apply_row(self, row: np.ndarray, out: np.ndarray) -> None:
        x4 = np.ascontiguousarray(row[None, :, None, :])
        y = kernels.conv2d_forward(x4, self.w, self.b, 0, self.pad_w,
                                   1, self.stride_w)
        out[:] = y[0, :, 0, :]
        if self.relu_after:
            np.maximum(out, 0.0, out=out)


@dataclass
class Affine:
    """Standalone eval-mode batchnorm as a per-channel affine."""

    name: str
    scale: np.ndarray
    shift: np.ndarray
    relu_after: bool
    width: int

    @property
    def out_ch(self) -> int:
        return len(self.scale)

    @property
    def out_width(self) -> int:
        return self.width

    stride_h: int = 1

    def apply_row(self, row: np.ndarray, out: np.ndarray) -> None:
        np.multiply(row, self.scale[:, None], out=out)
        out += self.shift[:, None]
        if self.relu_after:
            np.maximum(out, 0.0, out=out)


@dataclass
class StreamBlock:
    """Residual block: pre-transform, body units, shortcut, one add."""

    name: str
    pre: Affine | None
    body: list
    shortcut: FoldedConv | None  # None: identity shortcut
    shortcut_from_pre: bool
    post_relu: bool

    @property
    def stride_h(self) -> int:
        s = 1
        for u in self.body:
            s *= u.stride_h
        return s

    @property
    def out_ch(self) -> int:
        return self.body[-1].out_ch

    @property
    def out_width(self) -> int:
        return self.body[-1].out_width


@dataclass
class StreamPlan:
    input_shape: tuple  # (C, H, W)
    units: list
    gap_channels: int
    fc_w: np.ndarray
    fc_b: np.ndarray
    row_memory_floats: int = 0
    classifier_floats: int = 0

    def out_rows(self) -> int:
        rows = self.input_shape[1]
        for u in self.units:
            rows = (rows - 1) // u.stride_h + 1
        return rows


def _fold_flat(layers, prefix, widths):
    """Pair Conv [+BatchNorm] [+ReLU] runs into folded units.

    `widths` carries (in_width -> out_width) inference through the chain.
    """
    units = []
    i = 0
    w_cur = widths[0]
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Conv):
            g = layer.geom
            if g.kernel_h != 1:
                raise NotStreamableError(
                    f"not streamable: layer {layer.name} has kernel "
                    f"{g.kernel_h}x{g.kernel_w} (kernel height must be 1)")
            bn = None
            if i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm):
                bn = layers[i + 1]
                i += 1
            act = False
            if i + 1 < len(layers) and isinstance(layers[i + 1], ReLU):
                act = True
                i += 1
            if bn is not None:
                fw, fb = fold_batchnorm(layer.w.data, None, bn.gamma.data,
                                        bn.beta.data, bn.running_mean,
                                        bn.running_var, bn.eps)
            else:
                fw = layer.w.data.copy()
                fb = np.zeros(layer.cout, np.float32)
            out_w = (w_cur + 2 * g.pad_w - g.kernel_w) // g.stride_w + 1
            units.append(FoldedConv(layer.name, fw, fb, g.stride_h,
                                    g.stride_w, g.pad_w, act, w_cur, out_w))
            w_cur = out_w
        elif isinstance(layer, BatchNorm):
            act = False
            if i + 1 < len(layers) and isinstance(layers[i + 1], ReLU):
                act = True
                i += 1
            inv = (layer.gamma.data.astype(np.float64)
                   / np.sqrt(layer.running_var.astype(np.float64) + layer.eps))
            shift = layer.beta.data - layer.running_mean * inv.astype(np.float32)
            units.append(Affine(layer.name, inv.astype(np.float32),
                                shift.astype(np.float32), act, w_cur))
        elif isinstance(layer, ReLU):
            raise NotStreamableError(
                f"not streamable: unattached activation in {prefix}")
        elif isinstance(layer, MaxPool2x2):
            raise NotStreamableError(
                f"not streamable: layer {prefix}maxpool needs two rows "
                f"(2x2 pooling)")
        else:
            raise NotStreamableError(
                f"not streamable: unsupported layer {type(layer).__name__} "
                f"in {prefix}")
        i += 1
    return units, w_cur


def plan_stream(model: Model, input_hw=(32, 32)) -> StreamPlan:
    """Verify row-streamability, fold batchnorms, lay out row buffers."""
    c, (h, w) = model.input_channels, input_hw
    units = []
    w_cur = w
    layers = list(model.layers)
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv, BatchNorm)):
            # greedily absorb the conv/bn/relu run starting here
            j = i
            while j < len(layers) and isinstance(layers[j],
                                                 (Conv, BatchNorm, ReLU)):
                j += 1
            got, w_cur = _fold_flat(layers[i:j], "", [w_cur])
            units.extend(got)
            i = j
            continue
        if isinstance(layer, ResidualBlock):
            body, bw = _fold_flat(layer.body, f"{layer.name}.", [w_cur])
            sc = None
            if layer.shortcut is not None:
                scs, sw = _fold_flat(layer.shortcut, f"{layer.name}.sc.",
                                     [w_cur])
                if len(scs) != 1:
                    raise NotStreamableError(
                        f"not streamable: {layer.name} shortcut is not a "
                        f"single conv")
                sc = scs[0]
                if sw != bw:
                    raise NotStreamableError(
                        f"not streamable: {layer.name} shortcut width {sw} "
                        f"!= body width {bw}")
            units.append(StreamBlock(layer.name, None, body, sc,
                                     shortcut_from_pre=False, post_relu=True))
            w_cur = bw
        elif isinstance(layer, PreactBlock):
            bn1 = layer.bn1
            inv = (bn1.gamma.data.astype(np.float64)
                   / np.sqrt(bn1.running_var.astype(np.float64) + bn1.eps))
            pre = Affine(bn1.name, inv.astype(np.float32),
                         (bn1.beta.data - bn1.running_mean
                          * inv.astype(np.float32)).astype(np.float32),
                         relu_after=True, width=w_cur)
            body, bw = _fold_flat([layer.conv1, layer.bn2, ReLU(),
                                   layer.conv2], f"{layer.name}.", [w_cur])
            sc = None
            if layer.shortcut is not None:
                scs, _ = _fold_flat([layer.shortcut], f"{layer.name}.sc.",
                                    [w_cur])
                sc = scs[0]
            units.append(StreamBlock(layer.name, pre, body, sc,
                                     shortcut_from_pre=True, post_relu=False))
            w_cur = bw
        elif isinstance(layer, MaxPool2x2):
            raise NotStreamableError(
                "not streamable: retained max-pool needs two rows (rebuild "
                "with surgery='replace-all' for a streamable VGG student)")
        elif isinstance(layer, GlobalAvgPool):
            if i + 2 != len(layers) or not isinstance(layers[i + 1], Linear):
                raise NotStreamableError(
                    "not streamable: expected global-average-pool + linear "
                    "classifier tail")
            fc = layers[i + 1]
            plan = StreamPlan((c, h, w), units, fc.in_features,
                              fc.w.data.copy(), fc.b.data.copy())
            plan.row_memory_floats = _row_memory(units)
            plan.classifier_floats = fc.in_features
            return plan
        else:
            raise NotStreamableError(
                f"not streamable: unsupported layer {type(layer).__name__}")
        i += 1
    raise NotStreamableError("not streamable: no classifier tail found")


def _row_memory(units) -> int:
    total = 0
    for u in units:
        if isinstance(u, StreamBlock):
            if u.pre is not None:
                total += u.pre.out_ch * u.pre.out_width
            total += _row_memory(u.body)
            if u.shortcut is not None:
                total += u.shortcut.out_ch * u.shortcut.out_width
        else:
            total += u.out_ch * u.out_width
    return total


class StreamState:
    """Mutable per-stream buffers, phase counters and the classifier sum."""

    def __init__(self, plan: StreamPlan):
        self.plan = plan
        self._buffers: dict[int, np.ndarray] = {}
        self._rows_in: dict[int, int] = {}
        self._alloc(plan.units)
        self.gap_sum = np.zeros(plan.gap_channels, np.float64)
        self.gap_count = 0
        self.rows_pushed = 0
        self.finished = False

    def _alloc(self, units):
        for u in units:
            if isinstance(u, StreamBlock):
                if u.pre is not None:
                    self._buffers[id(u.pre)] = np.zeros(
                        (u.pre.out_ch, u.pre.out_width), np.float32)
                self._alloc(u.body)
                if u.shortcut is not None:
                    self._buffers[id(u.shortcut)] = np.zeros(
                        (u.shortcut.out_ch, u.shortcut.out_width), np.float32)
                self._rows_in[id(u)] = 0
            else:
                self._buffers[id(u)] = np.zeros((u.out_ch, u.out_width),
                                                np.float32)
                self._rows_in[id(u)] = 0

    def live_floats(self) -> int:
        """Allocated row-buffer audit (excludes the classifier sum)."""
        return sum(b.size for b in self._buffers.values())

    def _step_unit(self, unit, row):
        """Feed one row; returns the emitted row or None (stride skip)."""
        idx = self._rows_in[id(unit)]
        self._rows_in[id(unit)] = idx + 1
        if isinstance(unit, StreamBlock):
            if idx % unit.stride_h:
                return None
            src = row
            if unit.pre is not None:
                pre_buf = self._buffers[id(unit.pre)]
                unit.pre.apply_row(row, pre_buf)
                src = pre_buf
            h = src
            for u in unit.body:
                buf = self._buffers[id(u)]
                u.apply_row(h, buf)
                h = buf
            if unit.shortcut is not None:
                sbuf = self._buffers[id(unit.shortcut)]
                unit.shortcut.apply_row(src if unit.shortcut_from_pre else row,
                                        sbuf)
                h += sbuf
            else:
                h += row
            if unit.post_relu:
                np.maximum(h, 0.0, out=h)
            return h
        if isinstance(unit, FoldedConv) and idx % unit.stride_h:
            return None
        buf = self._buffers[id(unit)]
        unit.apply_row(row, buf)
        return buf

    def push_row(self, row: np.ndarray):
        """Feed the next image row (float32 [C, W], already normalized).

        Returns (emitted, logits): emitted is a list of
        (unit name, row copy) for every top-level unit that fired;
        logits appear exactly once, after the final row.
        """
        if self.finished:
            raise RuntimeError("push_row after the final row")
        c, h, w = self.plan.input_shape
        row = np.asarray(row, np.float32)
        if row.shape != (c, w):
            raise ValueError(f"row shape {row.shape} != ({c}, {w})")
        emitted = []
        cur = row
        for unit in self.plan.units:
            cur = self._step_unit(unit, cur)
            if cur is None:
                break
            emitted.append((unit.name, cur.copy()))
        if cur is not None:
            self.gap_sum += cur.sum(axis=1, dtype=np.float64)
            self.gap_count += cur.shape[1]
        self.rows_pushed += 1
        logits = None
        if self.rows_pushed == h:
            self.finished = True
            avg = (self.gap_sum / self.gap_count).astype(np.float32)
            logits = (self.plan.fc_w.astype(np.float64) @ avg.astype(np.float64)
                      + self.plan.fc_b).astype(np.float32)
        return emitted, logits


def stream_infer(plan: StreamPlan, image: np.ndarray) -> np.ndarray:
    """Run a whole [C,H,W] image through a fresh stream, row by row."""
    state = StreamState(plan)
    logits = None
    for r in range(image.shape[1]):
        _, logits = state.push_row(np.ascontiguousarray(image[:, r, :]))
    return logits


def equivalence_check(model: Model, image: np.ndarray,
                      input_hw=None) -> float:
    """Max absolute logit difference between batch and streaming paths."""
    from .tensor import Tensor

    image = np.asarray(image, np.float32)
    hw = input_hw or image.shape[1:]
    plan = plan_stream(model, hw)
    logits, _ = model.forward(Tensor(image[None]), training=False)
    streamed = stream_infer(plan, image)
    return float(np.abs(logits.data[0] - streamed).max())
