"""Network builders: ASNet for CIFAR, AS-ResNet for 224x224 inputs and
depthwise-convolution baselines.

All residual blocks are pre-activation bottlenecks built only from
pointwise convolutions around a shift::

    BN-ReLU-1x1 conv(eps * width)-BN-ReLU-ASL-1x1 conv(width)

with a strided 1x1 projection on the skip path when the stride or width
changes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .nn import (
    ActiveShift,
    BatchNorm,
    Conv1x1,
    Conv3x3,
    DepthwiseConv3x3,
    GlobalAvgPool,
    Linear,
    Network,
    ReLU,
    Residual,
    Sequential,
)
from .shift import InitMode, init_shift

FAMILIES = ("asnet-cifar", "as-resnet", "dw-baseline")
VARIANTS = ("1B-ASL-1", "1B-DW3-1", "1B-DW3-B-1")
ASRESNET_STAGES = (  # (width multiplier, repeats, stride)
    (1, 1, 1),
    (1, 3, 2),
    (2, 4, 2),
    (4, 6, 2),
    (8, 3, 2),
)


@dataclass
class NetworkConfig:
    family: str = "asnet-cifar"
    depth: int = 20
    width: int = 16
    epsilon: int = 1
    classes: int = 10
    init_mode: str = "uniform"
    trainable: bool = True
    variant: str = "1B-ASL-1"
    stride_at: str = "asl"  # or "conv2": put the block stride on the second 1x1 conv

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family != "as-resnet" and (self.depth < 8 or (self.depth - 2) % 6):
            raise ConfigError(f"depth {self.depth} is not of the form 6n+2 (n >= 1)")
        if self.width < 1 or self.epsilon < 1 or self.classes < 1:
            raise ConfigError("width, epsilon and classes must be positive")
        try:
            InitMode(self.init_mode)
        except ValueError:
            raise ConfigError(f"unknown init mode {self.init_mode!r}") from None
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stride_at not in ("asl", "conv2"):
            raise ConfigError(f"stride_at must be 'asl' or 'conv2', got {self.stride_at!r}")
        return self

    @property
    def blocks_per_stage(self):
        return (self.depth - 2) // 6

    # -- flat key = value files ---------------------------------------------

    def dumps(self):
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            key = {"base_width": "width", "num_classes": "classes"}.get(key, key)
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(kinds[key], val, lineno)
        return cls(**values).validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _fmt(v):
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _parse(kind, val, lineno):
    try:
        if kind in ("int", int):
            return int(val)
        if kind in ("bool", bool):
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        return val
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {val!r}") from None


class _Builder:
    def __init__(self, config, seed, dtype):
        self.cfg = config
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)

    def shift(self, channels, stride):
        cfg = self.cfg
        if cfg.init_mode == InitMode.GROUPED and channels < 9:
            raise ConfigError(f"grouped shift needs >= 9 channels, layer has {channels}")
        seed = int(self.rng.integers(2**63))
        return ActiveShift(init_shift(cfg.init_mode, channels, seed, trainable=cfg.trainable), stride, name="asl")

    def middle(self, channels, stride, variant):
        if variant == "1B-ASL-1":
            return [self.shift(channels, stride)]
        dw = DepthwiseConv3x3(channels, stride, self.rng, self.dtype, name="dwconv")
        if variant == "1B-DW3-B-1":
            return [dw, BatchNorm(channels, dtype=self.dtype, name="bn"), ReLU()]
        return [dw]

    def block(self, cin, cout, stride, name, variant="1B-ASL-1"):
        mid = self.cfg.epsilon * cout
        mid_stride, out_stride = (stride, 1) if self.cfg.stride_at == "asl" else (1, stride)
        body = [
            Conv1x1(cin, mid, 1, self.rng, self.dtype, name="conv1"),
            BatchNorm(mid, dtype=self.dtype, name="bn"),
            ReLU(),
            *self.middle(mid, mid_stride, variant),
            Conv1x1(mid, cout, out_stride, self.rng, self.dtype, name="conv2"),
        ]
        pre = Sequential([BatchNorm(cin, dtype=self.dtype, name="bn"), ReLU()], name="pre")
        shortcut = None
        if stride != 1 or cin != cout:
            shortcut = Conv1x1(cin, cout, stride, self.rng, self.dtype, name="proj")
        return Residual(Sequential(body, name="body"), pre, shortcut, name=name)

    def stem(self, width, stride):
        return Sequential(
            [
                Conv3x3(3, width, stride, self.rng, self.dtype, name="conv"),
                BatchNorm(width, dtype=self.dtype, name="bn"),
                ReLU(),
            ],
            name="stem",
        )

    def head(self, channels, classes):
        return [
            Sequential([BatchNorm(channels, dtype=self.dtype, name="bn"), ReLU()], name="final"),
            GlobalAvgPool(name="pool"),
            Linear(channels, classes, self.rng, self.dtype, name="fc"),
        ]


def build_asnet_cifar(config: NetworkConfig, seed=0, dtype=np.float32, variant=None) -> Network:
    """Three stages of widths (w, 2w, 4w), stride 2 entering stages 2 and 3."""
    config.validate()
    if config.family == "as-resnet":
        raise ConfigError("build_asnet_cifar needs a CIFAR family config")
    variant = variant or (config.variant if config.family == "dw-baseline" else "1B-ASL-1")
    b = _Builder(config, seed, dtype)
    w = config.width
    layers = [b.stem(w, 1)]
    cin = w
    for s, width in enumerate((w, 2 * w, 4 * w)):
        blocks = []
        for i in range(config.blocks_per_stage):
            stride = 2 if s > 0 and i == 0 else 1
            blocks.append(b.block(cin, width, stride, f"block{i}", variant))
            cin = width
        layers.append(Sequential(blocks, name=f"stage{s + 1}"))
    layers += b.head(cin, config.classes)
    return Network(Sequential(layers, name="net"), config.classes, dtype, meta={"family": config.family})


def build_dw_baseline(variant: str, config: NetworkConfig, seed=0, dtype=np.float32) -> Network:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return build_asnet_cifar(config, seed, dtype, variant=variant)


def build_asresnet(config: NetworkConfig, seed=0, dtype=np.float32) -> Network:
    """Stem 3x3/2 conv, then basic blocks repeated (1, 3, 4, 6, 3) at widths (w, w, 2w, 4w, 8w)."""
    config.validate()
    b = _Builder(config, seed, dtype)
    w = config.width
    layers = [b.stem(w, 2)]
    cin = w
    for s, (mult, repeats, stride) in enumerate(ASRESNET_STAGES):
        blocks = []
        for i in range(repeats):
            blocks.append(b.block(cin, mult * w, stride if i == 0 else 1, f"block{i}"))
            cin = mult * w
        layers.append(Sequential(blocks, name=f"stage{s + 1}"))
    layers += b.head(cin, config.classes)
    return Network(Sequential(layers, name="net"), config.classes, dtype, meta={"family": "as-resnet"})


def build(config: NetworkConfig, seed=0, dtype=np.float32) -> Network:
    config.validate()
    if config.family == "as-resnet":
        return build_asresnet(config, seed, dtype)
    if config.family == "dw-baseline":
        return build_dw_baseline(config.variant, config, seed, dtype)
    return build_asnet_cifar(config, seed, dtype)


def shape_trace(network: Network, input_shape):
    """(name, output shape) for each top-level stage, computed without running the net."""
    shape = tuple(input_shape)
    trace = [("input", shape)]
    for layer in network.body.children():
        shape = layer.output_shape(shape)
        trace.append((layer.local_name, shape))
    return trace


def spatial_trace(network: Network, size=224):
    """Spatial side length after the input and after every top-level stage."""
    sides = []
    for name, shape in shape_trace(network, (1, 3, size, size)):
        if name in ("final", "fc"):
            continue
        sides.append(shape[2] if len(shape) == 4 else 1)
    return sides
