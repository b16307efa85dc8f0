"""Architecture construction for teacher / row-student / column builds.

Every supported architecture is built once per filter mode; the three
builds of one spec share layer counts, channel plans and tapped-feature
shapes, differing only in the kernel geometry of the swappable convs
(3x3 teacher, 1x3 row student, 3x1 column; 1x1 convs are mode-invariant).

VGG gets its pooling surgery here: interior max-pools are replaced by a
stride-2 on the preceding conv, while the first and last pooling
positions keep their max-pools (the default `keep-edges` surgery;
`replace-all` removes every pool, which makes VGG students streamable).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConvGeometry,
    ShapeError,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2x2,
    relu,
)

FILTER_MODES = ("teacher", "row_student", "column")
SURGERY_MODES = ("keep-edges", "replace-all")

_VGG_PLANS = {
    13: [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
         512, 512, 512, "M", 512, 512, 512, "M"],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
         512, 512, 512, 512, "M", 512, 512, 512, 512, "M"],
}
_RESNET_PLANS = {  # (block kind, blocks per stage, expansion)
    18: ("basic", [2, 2, 2, 2], 1),
    34: ("basic", [3, 4, 6, 3], 1),
    50: ("bottleneck", [3, 4, 6, 3], 4),
}
_WRN_DEPTHS = {10, 16, 28, 40}
_TINY_RANGE = range(4, 11)


@dataclass(frozen=True)
class ArchSpec:
    """A supported (family, depth, widen, classes) configuration."""

    family: str
    depth: int
    widen: float = 1.0
    num_classes: int = 10

    def __post_init__(self):
        ok = ((self.family == "vgg" and self.depth in _VGG_PLANS)
              or (self.family == "resnet" and self.depth in _RESNET_PLANS)
              or (self.family == "wrn" and self.depth in _WRN_DEPTHS
                  and self.widen >= 1)
              or (self.family == "tiny" and self.depth in _TINY_RANGE))
        if not ok:
            raise ValueError(
                f"unsupported architecture {self.family}{self.depth}; supported: "
                f"{supported_arch_names()}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @classmethod
    def parse(cls, name: str, num_classes: int = 10) -> "ArchSpec":
        name = name.strip().lower()
        m = re.fullmatch(r"vgg(\d+)(?:bn)?", name)
        if m:
            return cls("vgg", int(m.group(1)), 1.0, num_classes)
        m = re.fullmatch(r"resnet(\d+)", name)
        if m:
            return cls("resnet", int(m.group(1)), 1.0, num_classes)
        m = re.fullmatch(r"wrn(\d+)-(\d+)", name)
        if m:
            return cls("wrn", int(m.group(1)), float(m.group(2)), num_classes)
        m = re.fullmatch(r"tiny(\d+)(?:x(\d+))?", name)
        if m:
            widen = float(m.group(2)) if m.group(2) else 1.0
            return cls("tiny", int(m.group(1)), widen, num_classes)
        raise ValueError(f"cannot parse architecture name {name!r}; supported: "
                         f"{supported_arch_names()}")

    @property
    def name(self) -> str:
        if self.family == "vgg":
            return f"vgg{self.depth}bn"
        if self.family == "wrn":
            return f"wrn{self.depth}-{int(self.widen)}"
        if self.family == "tiny" and self.widen != 1.0:
            return f"tiny{self.depth}x{int(self.widen)}"
        return f"{self.family}{self.depth}"


def supported_arch_names() -> list[str]:
    names = [f"vgg{d}bn" for d in _VGG_PLANS]
    names += [f"resnet{d}" for d in _RESNET_PLANS]
    names += ["wrn10-10", "wrn16-8", "wrn28-6", "wrn40-4"]
    names += [f"tiny{k}" for k in _TINY_RANGE]
    return names


def mode_geometry(mode: str, stride: int = 1) -> ConvGeometry:
    if mode == "teacher":
        return ConvGeometry.square3(stride)
    if mode == "row_student":
        return ConvGeometry.row3(stride)
    if mode == "column":
        return ConvGeometry.col3(stride)
    raise ValueError(f"unknown filter mode {mode!r}; expected one of {FILTER_MODES}")


# ---------------------------------------------------------------------------
# layers

class Conv:
    """Bias-free convolution layer (batchnorm supplies the shift)."""

    def __init__(self, name: str, cin: int, cout: int, geom: ConvGeometry,
                 mode_swapped: bool):
        self.name = name
        self.cin = cin
        self.cout = cout
        self.geom = geom
        self.mode_swapped = mode_swapped
        self.w = Tensor(np.zeros((cout, cin, geom.kernel_h, geom.kernel_w),
                                 np.float32), requires_grad=True)

    def forward(self, x, training):
        return conv2d(x, self.w, None, self.geom)

    def out_shape(self, shape):
        c, h, w = shape
        oh, ow = self.geom.out_hw(h, w)
        return (self.cout, oh, ow)

    def params(self):
        return [(f"{self.name}.w", self.w)]

    def buffers(self):
        return []


class BatchNorm:
    def __init__(self, name: str, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def forward(self, x, training):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                           self.running_var, training, self.eps, self.momentum)

    def out_shape(self, shape):
        return shape

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class ReLU:
    name = "relu"

    def forward(self, x, training):
        return relu(x)

    def out_shape(self, shape):
        return shape

    def params(self):
        return []

    def buffers(self):
        return []


class MaxPool2x2:
    name = "maxpool"

    def forward(self, x, training):
        return max_pool2x2(x)

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"max pool needs even extents, got {h}x{w}")
        return (c, h // 2, w // 2)

    def params(self):
        return []

    def buffers(self):
        return []


class GlobalAvgPool:
    name = "gap"

    def forward(self, x, training):
        return global_avg_pool(x)

    def out_shape(self, shape):
        return (shape[0], 1, 1)

    def params(self):
        return []

    def buffers(self):
        return []


class Linear:
    def __init__(self, name: str, in_features: int, out_features: int):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.w = Tensor(np.zeros((out_features, in_features), np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def forward(self, x, training):
        return linear(x, self.w, self.b)

    def out_shape(self, shape):
        return (self.out_features, 1, 1)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def buffers(self):
        return []


def _chain_forward(layers, x, training):
    for layer in layers:
        x = layer.forward(x, training)
    return x


def _chain_shape(layers, shape):
    for layer in layers:
        shape = layer.out_shape(shape)
    return shape


def _chain_items(layers, kind):
    out = []
    for layer in layers:
        out.extend(getattr(layer, kind)())
    return out


class ResidualBlock:
    """Post-activation residual block (the classic form): relu(body(x) + sc(x))."""

    def __init__(self, name: str, body: list, shortcut: list | None):
        self.name = name
        self.body = body
        self.shortcut = shortcut  # None: identity

    def forward(self, x, training):
        y = _chain_forward(self.body, x, training)
        s = x if self.shortcut is None else _chain_forward(self.shortcut, x, training)
        return relu(add(y, s))

    def out_shape(self, shape):
        out = _chain_shape(self.body, shape)
        s = shape if self.shortcut is None else _chain_shape(self.shortcut, shape)
        if out != s:
            raise ShapeError(f"{self.name}: body {out} vs shortcut {s}")
        return out

    def params(self):
        items = _chain_items(self.body, "params")
        if self.shortcut is not None:
            items += _chain_items(self.shortcut, "params")
        return items

    def buffers(self):
        items = _chain_items(self.body, "buffers")
        if self.shortcut is not None:
            items += _chain_items(self.shortcut, "buffers")
        return items


class PreactBlock:
    """Pre-activation block (wide-resnet style).

    o = relu(bn1(x)); out = conv2(relu(bn2(conv1(o)))) + (x or sc(o)).
    The shortcut conv, when present, consumes the preactivated input.
    """

    def __init__(self, name: str, bn1, conv1, bn2, conv2, shortcut):
        self.name = name
        self.bn1 = bn1
        self.conv1 = conv1
        self.bn2 = bn2
        self.conv2 = conv2
        self.shortcut = shortcut  # None: identity

    def forward(self, x, training):
        o = relu(self.bn1.forward(x, training))
        y = self.conv1.forward(o, training)
        y = relu(self.bn2.forward(y, training))
        y = self.conv2.forward(y, training)
        s = x if self.shortcut is None else self.shortcut.forward(o, training)
        return add(y, s)

    def out_shape(self, shape):
        out = self.conv2.out_shape(self.conv1.out_shape(shape))
        s = shape if self.shortcut is None else self.shortcut.out_shape(shape)
        if out != s:
            raise ShapeError(f"{self.name}: body {out} vs shortcut {s}")
        return out

    def _sublayers(self):
        subs = [self.bn1, self.conv1, self.bn2, self.conv2]
        if self.shortcut is not None:
            subs.append(self.shortcut)
        return subs

    def params(self):
        return _chain_items(self._sublayers(), "params")

    def buffers(self):
        return _chain_items(self._sublayers(), "buffers")


# ---------------------------------------------------------------------------
# model

@dataclass
class Model:
    spec: ArchSpec
    mode: str
    surgery: str
    layers: list = field(default_factory=list)
    tap_indices: list = field(default_factory=list)
    input_channels: int = 3

    def forward(self, x: Tensor, training: bool, collect_taps: bool = False):
        """Returns (logits, taps); taps is empty unless requested."""
        taps = []
        tap_set = set(self.tap_indices)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, training)
            if collect_taps and i in tap_set:
                taps.append(h)
        return h, taps

    def out_and_tap_shapes(self, input_hw=(32, 32)):
        shape = (self.input_channels, *input_hw)
        taps = []
        tap_set = set(self.tap_indices)
        for i, layer in enumerate(self.layers):
            shape = layer.out_shape(shape)
            if i in tap_set:
                taps.append(shape)
        return shape, taps

    def tap_shapes(self, input_hw=(32, 32)):
        return self.out_and_tap_shapes(input_hw)[1]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return _chain_items(self.layers, "params")

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Ordered named arrays: parameters plus batchnorm running stats."""
        items = [(name, t.data) for name, t in self.parameters()]
        items += _chain_items(self.layers, "buffers")
        return items

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None


def tap_points(model: Model) -> list[str]:
    """Ordered tap identifiers (the names of the tapped layers)."""
    return [model.layers[i].name if hasattr(model.layers[i], "name") else str(i)
            for i in model.tap_indices]


# ---------------------------------------------------------------------------
# builders

def _conv_bn_relu(layers, name, cin, cout, geom):
    layers.append(Conv(f"{name}", cin, cout, geom, mode_swapped=True))
    layers.append(BatchNorm(f"{name}.bn", cout))
    layers.append(ReLU())


def _build_vgg(spec: ArchSpec, mode: str, surgery: str) -> Model:
    plan = _VGG_PLANS[spec.depth]
    pool_total = plan.count("M")
    layers: list = []
    tap_indices: list[int] = []
    conv_channels: list[int] = [c for c in plan if c != "M"]

    cin = 3
    conv_idx = 0
    pool_idx = 0
    i = 0
    while i < len(plan):
        cout = plan[i]
        assert cout != "M"
        # a conv absorbs a following replaced pool as stride 2
        next_is_pool = i + 1 < len(plan) and plan[i + 1] == "M"
        replace = False
        if next_is_pool:
            interior = 0 < pool_idx < pool_total - 1
            replace = interior if surgery == "keep-edges" else True
        stride = 2 if replace else 1
        _conv_bn_relu(layers, f"conv{conv_idx + 1}", cin, cout,
                      mode_geometry(mode, stride))
        relu_index = len(layers) - 1
        last_conv = conv_idx == len(conv_channels) - 1
        if conv_idx == 0 or (not last_conv
                             and conv_channels[conv_idx + 1] > cout):
            tap_indices.append(relu_index)
        cin = cout
        conv_idx += 1
        i += 1
        if next_is_pool:
            if not replace:
                layers.append(MaxPool2x2())
            pool_idx += 1
            i += 1
    layers.append(GlobalAvgPool())
    layers.append(Linear("fc", cin, spec.num_classes))
    return Model(spec, mode, surgery, layers, tap_indices)


def _basic_block(name, cin, cout, stride, mode):
    body = [
        Conv(f"{name}.conv1", cin, cout, mode_geometry(mode, stride), True),
        BatchNorm(f"{name}.bn1", cout),
        ReLU(),
        Conv(f"{name}.conv2", cout, cout, mode_geometry(mode, 1), True),
        BatchNorm(f"{name}.bn2", cout),
    ]
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = [Conv(f"{name}.sc", cin, cout, ConvGeometry.point(stride), False),
                    BatchNorm(f"{name}.sc.bn", cout)]
    return ResidualBlock(name, body, shortcut)


def _bottleneck_block(name, cin, mid, stride, mode, expansion=4):
    cout = mid * expansion
    body = [
        Conv(f"{name}.conv1", cin, mid, ConvGeometry.point(1), False),
        BatchNorm(f"{name}.bn1", mid),
        ReLU(),
        Conv(f"{name}.conv2", mid, mid, mode_geometry(mode, stride), True),
        BatchNorm(f"{name}.bn2", mid),
        ReLU(),
        Conv(f"{name}.conv3", mid, cout, ConvGeometry.point(1), False),
        BatchNorm(f"{name}.bn3", cout),
    ]
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = [Conv(f"{name}.sc", cin, cout, ConvGeometry.point(stride), False),
                    BatchNorm(f"{name}.sc.bn", cout)]
    return ResidualBlock(name, body, shortcut)


def _build_resnet(spec: ArchSpec, mode: str, surgery: str) -> Model:
    kind, blocks, expansion = _RESNET_PLANS[spec.depth]
    widths = [64, 128, 256, 512]
    layers: list = []
    tap_indices: list[int] = []

    layers.append(Conv("stem", 3, 64, mode_geometry(mode, 1), True))
    layers.append(BatchNorm("stem.bn", 64))
    layers.append(ReLU())
    tap_indices.append(len(layers) - 1)

    cin = 64
    for s, (width, n) in enumerate(zip(widths, blocks), start=1):
        for b in range(n):
            stride = 2 if (s > 1 and b == 0) else 1
            name = f"stage{s}.block{b}"
            if kind == "basic":
                blk = _basic_block(name, cin, width, stride, mode)
                cin = width
            else:
                blk = _bottleneck_block(name, cin, width, stride, mode, expansion)
                cin = width * expansion
            layers.append(blk)
        tap_indices.append(len(layers) - 1)

    layers.append(GlobalAvgPool())
    layers.append(Linear("fc", cin, spec.num_classes))
    return Model(spec, mode, surgery, layers, tap_indices)


def _build_wrn(spec: ArchSpec, mode: str, surgery: str) -> Model:
    n = (spec.depth - 4) // 6
    if n < 1 or (spec.depth - 4) % 6:
        raise ValueError(f"wrn depth must be 6n+4, got {spec.depth}")
    k = int(spec.widen)
    widths = [16 * k, 32 * k, 64 * k]
    layers: list = []
    tap_indices: list[int] = []

    layers.append(Conv("stem", 3, 16, mode_geometry(mode, 1), True))
    tap_indices.append(len(layers) - 1)

    cin = 16
    for g, width in enumerate(widths, start=1):
        for b in range(n):
            stride = 2 if (g > 1 and b == 0) else 1
            name = f"group{g}.block{b}"
            shortcut = None
            if stride != 1 or cin != width:
                shortcut = Conv(f"{name}.sc", cin, width,
                                ConvGeometry.point(stride), False)
            blk = PreactBlock(
                name,
                BatchNorm(f"{name}.bn1", cin),
                Conv(f"{name}.conv1", cin, width, mode_geometry(mode, stride), True),
                BatchNorm(f"{name}.bn2", width),
                Conv(f"{name}.conv2", width, width, mode_geometry(mode, 1), True),
                shortcut,
            )
            layers.append(blk)
            cin = width
        tap_indices.append(len(layers) - 1)

    layers.append(BatchNorm("final.bn", cin))
    layers.append(ReLU())
    layers.append(GlobalAvgPool())
    layers.append(Linear("fc", cin, spec.num_classes))
    return Model(spec, mode, surgery, layers, tap_indices)


def _tiny_stage_sizes(k: int) -> list[int]:
    stages = 2 if k <= 5 else 3
    base, extra = divmod(k, stages)
    return [base + (1 if s < extra else 0) for s in range(stages)]


def _build_tiny(spec: ArchSpec, mode: str, surgery: str) -> Model:
    sizes = _tiny_stage_sizes(spec.depth)
    widths = [int(8 * spec.widen * (2 ** s)) for s in range(len(sizes))]
    layers: list = []
    tap_indices: list[int] = []

    cin = 3
    conv_idx = 0
    for s, (width, count) in enumerate(zip(widths, sizes)):
        for b in range(count):
            stride = 2 if (s > 0 and b == 0) else 1
            _conv_bn_relu(layers, f"conv{conv_idx + 1}", cin, width,
                          mode_geometry(mode, stride))
            relu_index = len(layers) - 1
            if conv_idx == 0 or (s + 1 < len(sizes) and b == count - 1):
                tap_indices.append(relu_index)
            cin = width
            conv_idx += 1
    layers.append(GlobalAvgPool())
    layers.append(Linear("fc", cin, spec.num_classes))
    return Model(spec, mode, surgery, layers, tap_indices)


def build(spec: ArchSpec, mode: str, surgery: str = "keep-edges") -> Model:
    """Build the architecture in the given filter mode.

    The same spec always yields the same layer plan in every mode; this
    is what makes the tapped features shape-compatible between teacher
    and students, and it is asserted here at build time.
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode {mode!r}; expected one of "
                         f"{FILTER_MODES}")
    if surgery not in SURGERY_MODES:
        raise ValueError(f"unknown surgery mode {surgery!r}; expected one of "
                         f"{SURGERY_MODES}")
    builders = {"vgg": _build_vgg, "resnet": _build_resnet,
                "wrn": _build_wrn, "tiny": _build_tiny}
    model = builders[spec.family](spec, mode, surgery)
    if len(model.tap_indices) < 2:
        raise AssertionError(f"{spec.name}: expected >= 2 tap points")

    # mode-swapped convs must preserve the spatial plan, otherwise taps
    # would not line up across filter modes
    ref = build_tap_plan(spec, surgery)
    got = model.tap_shapes()
    if got != ref:
        raise AssertionError(
            f"{spec.name} [{mode}]: tap shapes {got} deviate from the "
            f"mode-independent plan {ref}")
    return model


def build_tap_plan(spec: ArchSpec, surgery: str = "keep-edges"):
    """Mode-independent tapped-feature shapes (teacher geometry reference)."""
    return _cached_tap_plan(spec, surgery)


_TAP_PLAN_CACHE: dict = {}


def _cached_tap_plan(spec, surgery):
    key = (spec, surgery)
    if key not in _TAP_PLAN_CACHE:
        builders = {"vgg": _build_vgg, "resnet": _build_resnet,
                    "wrn": _build_wrn, "tiny": _build_tiny}
        _TAP_PLAN_CACHE[key] = builders[spec.family](spec, "teacher",
                                                     surgery).tap_shapes()
    return _TAP_PLAN_CACHE[key]


# ---------------------------------------------------------------------------
# parameter accounting and initialization

def param_count(model: Model, convs_only: bool = False) -> int:
    """Exact parameter totals.

    With ``convs_only`` only the mode-swapped convolution weights are
    counted: that subset shrinks by exactly 3x from teacher to row
    student when N=3.
    """
    total = 0
    for layer in _walk(model.layers):
        if isinstance(layer, Conv):
            if convs_only and not layer.mode_swapped:
                continue
            total += layer.w.size
        elif not convs_only and isinstance(layer, BatchNorm):
            total += layer.gamma.size + layer.beta.size
        elif not convs_only and isinstance(layer, Linear):
            total += layer.w.size + layer.b.size
    return total


def _walk(layers):
    for layer in layers:
        if isinstance(layer, ResidualBlock):
            yield from _walk(layer.body)
            if layer.shortcut is not None:
                yield from _walk(layer.shortcut)
        elif isinstance(layer, PreactBlock):
            yield from _walk(layer._sublayers())
        else:
            yield layer


def init_weights(model: Model, seed: int) -> Model:
    """Fan-in-scaled normal init, deterministic per seed.

    Conv and linear weights draw from N(0, 2/fan_in); linear biases are
    zero; batchnorm starts as the identity affine with reset running
    statistics.
    """
    rng = np.random.default_rng(seed)
    for layer in _walk(model.layers):
        if isinstance(layer, Conv):
            fan_in = layer.cin * layer.geom.kernel_h * layer.geom.kernel_w
            std = np.sqrt(2.0 / fan_in)
            layer.w.data = (rng.standard_normal(layer.w.shape, dtype=np.float32)
                            * np.float32(std))
        elif isinstance(layer, Linear):
            std = np.sqrt(2.0 / layer.in_features)
            layer.w.data = (rng.standard_normal(layer.w.shape, dtype=np.float32)
                            * np.float32(std))
            layer.b.data = np.zeros_like(layer.b.data)
        elif isinstance(layer, BatchNorm):
            layer.gamma.data = np.ones_like(layer.gamma.data)
            layer.beta.data = np.zeros_like(layer.beta.data)
            layer.running_mean[:] = 0.0
            layer.running_var[:] = 1.0
    return model
