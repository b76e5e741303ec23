"""Shift operators: integer shifts, grouped shifts and the active shift layer.

Everything here works on NCHW ndarrays.  A shift by (di, dj) reads
``x[..., m + di, n + dj]`` for output position (m, n) and yields zero where
that read falls outside the image.  The active shift layer (ASL) generalises
this to real-valued per-channel shifts (alpha_c, beta_c) using bilinear
interpolation; alpha moves along the height axis and beta along the width
axis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import ConvSpec, KernelOffset, as_tensor, kernel_offsets, window, window_adjoint


# -- integer shifts --------------------------------------------------------

def shift_integer(x: np.ndarray, offset) -> np.ndarray:
    """Shift every channel by the same integer offset (a ``KernelOffset`` or ``(di, dj)``)."""
    x = as_tensor(x)
    di, dj = (offset.di, offset.dj) if isinstance(offset, KernelOffset) else offset
    return window(x, int(di), int(dj))


# -- convolution as shifted pointwise convolutions ---------------------------

def decompose_conv(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Spatial convolution as the sum over kernel taps of 1x1 convolutions on shifted inputs."""
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=x.dtype)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"decompose_conv: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, spec.in_channels, spec.kernel):
        raise ShapeError(
            f"decompose_conv: weight shape {weight.shape} does not match "
            f"{(spec.out_channels, spec.in_channels, spec.kernel)}"
        )
    ho, wo = spec.output_hw(h, w)
    y = np.zeros((n, spec.out_channels, ho * wo), dtype=x.dtype)
    for off in spec.offsets():
        shifted = window(x, off.di, off.dj, spec.stride, (ho, wo)).reshape(n, c, ho * wo)
        y += np.matmul(weight[:, :, off.index], shifted)
    return y.reshape(n, spec.out_channels, ho, wo)


# -- grouped (heuristic) shift ----------------------------------------------

@dataclass(frozen=True)
class GroupedShiftSpec:
    """Channel-group to kernel-offset assignment of the heuristic grouped shift.

    ``n = C // K`` channels per group; ``G = K`` groups when K divides C,
    otherwise an extra leftover group that is not shifted.
    """

    channels: int
    kernel: int = 9

    def __post_init__(self):
        if self.channels < self.kernel:
            raise ValueError(f"grouped shift needs at least {self.kernel} channels, got {self.channels}")

    @property
    def per_group(self) -> int:
        return self.channels // self.kernel

    @property
    def groups(self) -> int:
        return self.kernel if self.channels % self.kernel == 0 else self.kernel + 1

    def group_offsets(self) -> list[tuple[int, int]]:
        offs = [(o.di, o.dj) for o in kernel_offsets(self.kernel)]
        if self.groups > self.kernel:
            offs.append((0, 0))
        return offs

    def channel_group(self) -> np.ndarray:
        return np.minimum(np.arange(self.channels) // self.per_group, self.kernel)

    def channel_offsets(self) -> np.ndarray:
        """(C, 2) integer array of per-channel shifts."""
        return np.asarray(self.group_offsets(), dtype=np.int64)[self.channel_group()]


def shift_grouped(x: np.ndarray, spec: GroupedShiftSpec) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != spec.channels:
        raise ShapeError(f"shift_grouped: input has {x.shape[1]} channels, spec describes {spec.channels}")
    y = np.empty_like(x)
    groups = spec.channel_group()
    for g, (di, dj) in enumerate(spec.group_offsets()):
        idx = np.flatnonzero(groups == g)
        y[:, idx] = window(x[:, idx], di, dj)
    return y


# -- active shift layer ------------------------------------------------------

class InitMode(str, enum.Enum):
    GROUPED = "grouped"        # heuristic grouped assignment, integer
    INT_NORMAL = "int-normal"  # N(0, 1) rounded to the nearest integer
    REAL_NORMAL = "real-normal"
    UNIFORM = "uniform"        # U[-1, 1]


@dataclass
class ShiftParams:
    """Per-channel (alpha, beta) shift pairs, stored as a (C, 2) array."""

    values: np.ndarray
    trainable: bool = True
    init_mode: InitMode = InitMode.UNIFORM

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 2:
            raise ShapeError(f"shift parameters must have shape (C, 2), got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def beta(self) -> np.ndarray:
        return self.values[:, 1]

    def num_params(self) -> int:
        return self.values.size


def init_shift(mode, channels: int, seed=None, kernel: int = 9, trainable=None) -> ShiftParams:
    """Draw initial shift parameters for one layer.

    ``trainable`` defaults to True only for :attr:`InitMode.UNIFORM`, the
    learned configuration; the other modes are the fixed-shift baselines.
    """
    mode = InitMode(mode)
    if channels < 1:
        raise ValueError("channel count must be >= 1")
    rng = np.random.default_rng(seed)
    if mode is InitMode.UNIFORM:
        vals = rng.uniform(-1.0, 1.0, size=(channels, 2))
    elif mode is InitMode.REAL_NORMAL:
        vals = rng.standard_normal((channels, 2))
    elif mode is InitMode.INT_NORMAL:
        vals = np.rint(rng.standard_normal((channels, 2)))
    else:
        vals = GroupedShiftSpec(channels, kernel).channel_offsets().astype(np.float64)
    if trainable is None:
        trainable = mode is InitMode.UNIFORM
    return ShiftParams(vals + 0.0, trainable=trainable, init_mode=mode)


@dataclass
class InterpolationStencil:
    """Integer floors and fractional parts of each channel's shift."""

    floor: np.ndarray  # (C, 2) int64
    frac: np.ndarray   # (C, 2) in [0, 1)

    @classmethod
    def from_shifts(cls, values: np.ndarray) -> "InterpolationStencil":
        fl = np.floor(values)
        return cls(fl.astype(np.int64), values - fl)

    def groups(self):
        """Yield (channel index, floor_alpha, floor_beta) for channels sharing a floor pair."""
        pairs, inverse = np.unique(self.floor, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        if len(pairs) == 1:
            yield slice(None), int(pairs[0, 0]), int(pairs[0, 1])
            return
        for g, (fa, fb) in enumerate(pairs):
            yield np.flatnonzero(inverse == g), int(fa), int(fb)


@dataclass
class ASLCache:
    x: np.ndarray
    stencil: InterpolationStencil
    stride: int
    out_hw: tuple[int, int] = field(default=(0, 0))


def _corners(xs, fa, fb, stride, out_hw):
    # the four nearest integer samples: Z1 (fa, fb), Z2 (fa, fb+1), Z3 (fa+1, fb), Z4 (fa+1, fb+1)
    return (
        window(xs, fa, fb, stride, out_hw),
        window(xs, fa, fb + 1, stride, out_hw),
        window(xs, fa + 1, fb, stride, out_hw),
        window(xs, fa + 1, fb + 1, stride, out_hw),
    )


def _shift_array(theta) -> np.ndarray:
    return theta.values if isinstance(theta, ShiftParams) else np.asarray(theta, dtype=np.float64)


def asl_forward(x: np.ndarray, theta, stride: int = 1):
    """Resample each channel at (stride*m + alpha_c, stride*n + beta_c).

    Returns the output tensor and the cache needed by :func:`asl_backward`.
    """
    x = as_tensor(x)
    values = _shift_array(theta)
    if values.shape != (x.shape[1], 2):
        raise ShapeError(f"asl_forward: {values.shape[0]} shift pairs for an input with {x.shape[1]} channels")
    n, c, h, w = x.shape
    out_hw = (-(-h // stride), -(-w // stride))
    stencil = InterpolationStencil.from_shifts(values)
    frac = stencil.frac.astype(x.dtype)
    y = np.empty((n, c) + out_hw, dtype=x.dtype)
    for idx, fa, fb in stencil.groups():
        z1, z2, z3, z4 = _corners(x[:, idx], fa, fb, stride, out_hw)
        a = frac[idx, 0][:, None, None]
        b = frac[idx, 1][:, None, None]
        y[:, idx] = z1 * ((1 - a) * (1 - b)) + z3 * (a * (1 - b)) + z2 * ((1 - a) * b) + z4 * (a * b)
    return y, ASLCache(x, stencil, stride, out_hw)


def asl_backward(grad_out: np.ndarray, cache: ASLCache, need_theta: bool = True):
    """Gradients w.r.t. the input and the (C, 2) shift parameters.

    The shift gradient is summed in float64.  At exactly-integer shifts the
    floor-based stencil gives the right-sided derivative.
    """
    x = cache.x
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    n, c, h, w = x.shape
    if grad_out.shape != (n, c) + tuple(cache.out_hw):
        raise ShapeError(f"asl_backward: gradient shape {grad_out.shape} does not match output {(n, c) + tuple(cache.out_hw)}")
    s = cache.stride
    frac = cache.stencil.frac.astype(x.dtype)
    grad_x = np.zeros_like(x)
    grad_theta = np.zeros((c, 2), dtype=np.float64) if need_theta else None
    for idx, fa, fb in cache.stencil.groups():
        g = grad_out[:, idx]
        a = frac[idx, 0][:, None, None]
        b = frac[idx, 1][:, None, None]
        gx = window_adjoint(g * ((1 - a) * (1 - b)), fa, fb, s, (h, w))
        window_adjoint(g * ((1 - a) * b), fa, fb + 1, s, (h, w), out=gx)
        window_adjoint(g * (a * (1 - b)), fa + 1, fb, s, (h, w), out=gx)
        window_adjoint(g * (a * b), fa + 1, fb + 1, s, (h, w), out=gx)
        grad_x[:, idx] = gx
        if need_theta:
            z1, z2, z3, z4 = _corners(x[:, idx], fa, fb, s, cache.out_hw)
            d_alpha = (z3 - z1) * (1 - b) + (z4 - z2) * b
            d_beta = (z2 - z1) * (1 - a) + (z4 - z3) * a
            grad_theta[idx, 0] = np.sum(g * d_alpha, axis=(0, 2, 3), dtype=np.float64)
            grad_theta[idx, 1] = np.sum(g * d_beta, axis=(0, 2, 3), dtype=np.float64)
    return grad_x, grad_theta
