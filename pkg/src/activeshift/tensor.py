"""Dense NCHW tensors and the basic numeric kernels.

Tensors are plain :class:`numpy.ndarray` objects of rank 4 laid out
row-major as (batch, channels, height, width) with dtype float32 or
float64.  Keeping them as ndarrays means the pointwise convolution is a
batched GEMM over the flattened spatial axis without any copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Set the thread count used by the BLAS backend (1 = benchmark mode)."""
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = n
    threadpool_limits(limits=n, user_api="blas")


def get_num_threads() -> int:
    return _num_threads


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate (and if needed convert) ``x`` into a contiguous 4-D tensor."""
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D (N, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
    return arr


# -- strided integer windows -------------------------------------------------

def _span(n_in: int, n_out: int, offset: int, stride: int) -> tuple[int, int]:
    # output indices o with 0 <= stride * o + offset < n_in
    lo = max(0, -(offset // stride))
    hi = min(n_out, (n_in - 1 - offset) // stride + 1)
    return lo, max(lo, hi)


def window(x: np.ndarray, di: int, dj: int, stride: int = 1, out_hw=None) -> np.ndarray:
    """``y[..., m, p] = x[..., stride*m + di, stride*p + dj]``, zero outside."""
    h, w = x.shape[-2:]
    if out_hw is None:
        out_hw = (-(-h // stride), -(-w // stride))
    oh, ow = out_hw
    y = np.zeros(x.shape[:-2] + (oh, ow), dtype=x.dtype)
    r0, r1 = _span(h, oh, di, stride)
    c0, c1 = _span(w, ow, dj, stride)
    if r0 < r1 and c0 < c1:
        y[..., r0:r1, c0:c1] = x[
            ...,
            stride * r0 + di: stride * (r1 - 1) + di + 1: stride,
            stride * c0 + dj: stride * (c1 - 1) + dj + 1: stride,
        ]
    return y


def window_adjoint(g: np.ndarray, di: int, dj: int, stride: int, in_hw, out=None) -> np.ndarray:
    """Transpose of :func:`window`: scatter-add ``g`` back onto the input grid."""
    h, w = in_hw
    oh, ow = g.shape[-2:]
    if out is None:
        out = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
    r0, r1 = _span(h, oh, di, stride)
    c0, c1 = _span(w, ow, dj, stride)
    if r0 < r1 and c0 < c1:
        out[
            ...,
            stride * r0 + di: stride * (r1 - 1) + di + 1: stride,
            stride * c0 + dj: stride * (c1 - 1) + dj + 1: stride,
        ] += g[..., r0:r1, c0:c1]
    return out


@dataclass(frozen=True)
class KernelOffset:
    """Displacement (di, dj) of kernel tap ``index`` (0-based, row-major)."""

    index: int
    di: int
    dj: int


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    in_channels: int
    kernel: int = 9  # number of taps K, e.g. 9 for 3x3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if math.isqrt(self.kernel) ** 2 != self.kernel:
            raise ValueError(f"kernel tap count {self.kernel} is not a perfect square")

    @property
    def side(self) -> int:
        return math.isqrt(self.kernel)

    def offsets(self) -> list[KernelOffset]:
        return kernel_offsets(self.kernel, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k = self.side
        ho = (h + 2 * self.padding - k) // self.stride + 1
        wo = (w + 2 * self.padding - k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k}x{k} with padding {self.padding}")
        return ho, wo


def kernel_offsets(kernel: int, padding: int | None = None) -> list[KernelOffset]:
    """Tap displacements from top-left to bottom-right.

    With the default ("same") padding a 3x3 kernel yields
    {-1, 0, 1} x {-1, 0, 1}.
    """
    side = math.isqrt(kernel)
    if side * side != kernel:
        raise ValueError(f"kernel tap count {kernel} is not a perfect square")
    if padding is None:
        padding = (side - 1) // 2
    return [
        KernelOffset(u * side + v, u - padding, v - padding)
        for u in range(side)
        for v in range(side)
    ]


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense matrix product ``a @ b``.

    Backed by the BLAS ``gemm`` numpy links against; with a single BLAS
    thread the accumulation order is fixed, so results are reproducible.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm: incompatible operands {a.shape} and {b.shape}")
    return a @ b


def conv_naive(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Reference convolution, evaluated output position by output position.

    ``weight`` has shape (D, C, K).  Reads outside the input are zero.
    Deliberately slow; only used as an oracle.
    """
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=x.dtype)
    n_batch, c_in, h, w = x.shape
    if c_in != spec.in_channels:
        raise ShapeError(f"conv_naive: input has {c_in} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, spec.in_channels, spec.kernel):
        raise ShapeError(
            f"conv_naive: weight shape {weight.shape} does not match "
            f"{(spec.out_channels, spec.in_channels, spec.kernel)}"
        )
    ho, wo = spec.output_hw(h, w)
    offsets = spec.offsets()
    y = np.zeros((n_batch, spec.out_channels, ho, wo), dtype=x.dtype)
    for n in range(n_batch):
        for m in range(ho):
            for p in range(wo):
                acc = np.zeros(spec.out_channels, dtype=x.dtype)
                for off in offsets:
                    r = m * spec.stride + off.di
                    s = p * spec.stride + off.dj
                    if 0 <= r < h and 0 <= s < w:
                        acc += weight[:, :, off.index] @ x[n, :, r, s]
                y[n, :, m, p] = acc
    return y


def conv_pointwise(x: np.ndarray, weight: np.ndarray, stride: int = 1, out=None) -> np.ndarray:
    """1x1 convolution: one (D x C) @ (C x H*W) GEMM per image.

    ``out``, if given, is a contiguous (N, D, H_out, W_out) array to write into.
    """
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv_pointwise: weight {weight.shape} incompatible with input {x.shape}")
    if stride != 1:
        x = np.ascontiguousarray(x[:, :, ::stride, ::stride])
    n, c, h, w = x.shape
    d = weight.shape[0]
    if out is not None:
        if out.shape != (n, d, h, w) or out.dtype != x.dtype:
            raise ShapeError(f"conv_pointwise: out {out.shape} {out.dtype} should be {(n, d, h, w)} {x.dtype}")
        np.matmul(weight, x.reshape(n, c, h * w), out=out.reshape(n, d, h * w))
        return out
    return np.matmul(weight, x.reshape(n, c, h * w)).reshape(n, d, h, w)


def depthwise_conv(x: np.ndarray, weight: np.ndarray, stride: int = 1, out=None) -> np.ndarray:
    """Per-channel 3x3 (or any square) convolution with "same" zero padding.

    ``weight`` has shape (C, K).  Each tap is a strided shifted window
    scaled channel-wise, so there is no cross-channel mixing.
    """
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=x.dtype)
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv: weight {weight.shape} incompatible with input {x.shape}")
    h, w = x.shape[-2:]
    out_hw = (-(-h // stride), -(-w // stride))
    shape = x.shape[:2] + out_hw
    if out is not None and (out.shape != shape or out.dtype != x.dtype):
        raise ShapeError(f"depthwise_conv: out {out.shape} {out.dtype} should be {shape} {x.dtype}")
    y = np.zeros(shape, dtype=x.dtype) if out is None else out
    if out is not None:
        y.fill(0)
    for off in kernel_offsets(weight.shape[1]):
        y += weight[:, off.index, None, None] * window(x, off.di, off.dj, stride, out_hw)
    return y


@dataclass(frozen=True)
class LayerDesc:
    """What :func:`count_flops` needs to know about a layer.

    ``kind`` is one of ``conv``, ``depthwise``, ``elementwise`` or ``asl``;
    ``height``/``width`` are the *output* spatial dims.
    """

    kind: str
    in_channels: int
    out_channels: int = 1
    kernel: int = 1
    height: int = 1
    width: int = 1


def count_flops(desc: LayerDesc) -> int:
    """Multiply-accumulate count, reported as "FLOPs".

    Convolutions follow (D x C x K) x (W x H); a depthwise convolution is
    D = 1 per channel, i.e. C x K x W x H.  Elementwise layers (BN with
    affine, ReLU, eltwise sum) count one op per output element and the
    bilinear shift counts one MAC per interpolation corner.
    """
    hw = desc.height * desc.width
    if desc.kind == "conv":
        return desc.out_channels * desc.in_channels * desc.kernel * hw
    if desc.kind == "depthwise":
        return desc.in_channels * desc.kernel * hw
    if desc.kind == "elementwise":
        return desc.in_channels * hw
    if desc.kind == "asl":
        return 4 * desc.in_channels * hw
    raise ValueError(f"unknown layer kind {desc.kind!r}")
