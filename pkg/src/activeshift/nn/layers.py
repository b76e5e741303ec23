"""Layers with hand-written forward and backward passes.

A layer caches whatever its backward pass needs during ``forward`` and
consumes it in ``backward``.  Parameters are :class:`Param` objects; the
``kind`` tag drives optimizer policy (weight decay, normalized shift
updates).
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError, StateError
from ..shift import ShiftParams, asl_backward, asl_forward
from ..tensor import kernel_offsets, window, window_adjoint


class Param:
    """A trainable (or frozen) array and its gradient buffer.

    ``kind`` is one of ``weight`` (decayed), ``bias``, ``bn`` or ``shift``.
    """

    def __init__(self, name, data, kind="weight", trainable=True):
        self.name = name
        self.data = data
        self.kind = kind
        self.trainable = trainable
        self.grad = None

    @property
    def decay(self):
        return self.kind == "weight"

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name!r}, shape={self.data.shape}, kind={self.kind}{flag})"


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name=None):
        self.local_name = name or self.kind
        self.name = self.local_name
        self._cache = None

    def params(self):
        return []

    def buffers(self):
        return {}

    def children(self):
        return []

    def output_shape(self, shape):
        return shape

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def astype(self, dtype):
        for p in self.params():
            if p.kind != "shift":
                p.data = p.data.astype(dtype)
        for child in self.children():
            child.astype(dtype)

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"layer {self.name}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def _check_channels(self, x, channels):
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"layer {self.name}: expected (N, {channels}, H, W) input, got {x.shape}")

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv1x1(Layer):
    kind = "conv1x1"

    def __init__(self, in_channels, out_channels, stride=1, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.weight = Param("weight", _he_normal(rng, (out_channels, in_channels), in_channels, dtype))

    def params(self):
        return [self.weight]

    def output_shape(self, shape):
        n, _, h, w = shape
        return (n, self.out_channels, -(-h // self.stride), -(-w // self.stride))

    def forward(self, x, training=True):
        self._check_channels(x, self.in_channels)
        in_hw = x.shape[2:]
        if self.stride != 1:
            x = np.ascontiguousarray(x[:, :, ::self.stride, ::self.stride])
        n, c, h, w = x.shape
        xf = x.reshape(n, c, h * w)
        self._cache = (xf, in_hw)
        return np.matmul(self.weight.data, xf).reshape(n, self.out_channels, h, w)

    def backward(self, grad):
        xf, in_hw = self._take_cache()
        n, d, h, w = grad.shape
        gf = grad.reshape(n, d, h * w)
        if self.weight.trainable:
            self.weight.grad = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))
        gx = np.matmul(self.weight.data.T, gf).reshape(n, self.in_channels, h, w)
        if self.stride != 1:
            full = np.zeros((n, self.in_channels) + tuple(in_hw), dtype=gx.dtype)
            full[:, :, ::self.stride, ::self.stride] = gx
            gx = full
        return gx


class Conv3x3(Layer):
    """Dense 3x3 convolution computed as nine shifted 1x1 convolutions."""

    kind = "conv3x3"

    def __init__(self, in_channels, out_channels, stride=1, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.weight = Param("weight", _he_normal(rng, (out_channels, in_channels, 9), 9 * in_channels, dtype))
        self.offsets = kernel_offsets(9)

    def params(self):
        return [self.weight]

    def output_shape(self, shape):
        n, _, h, w = shape
        return (n, self.out_channels, -(-h // self.stride), -(-w // self.stride))

    def forward(self, x, training=True):
        self._check_channels(x, self.in_channels)
        n, c, h, w = x.shape
        out_hw = (-(-h // self.stride), -(-w // self.stride))
        p = out_hw[0] * out_hw[1]
        y = np.zeros((n, self.out_channels, p), dtype=x.dtype)
        for off in self.offsets:
            xs = window(x, off.di, off.dj, self.stride, out_hw).reshape(n, c, p)
            y += np.matmul(self.weight.data[:, :, off.index], xs)
        self._cache = x
        return y.reshape((n, self.out_channels) + out_hw)

    def backward(self, grad):
        x = self._take_cache()
        n, c, h, w = x.shape
        out_hw = grad.shape[2:]
        gf = grad.reshape(n, self.out_channels, -1)
        gx = np.zeros_like(x)
        gw = np.zeros_like(self.weight.data) if self.weight.trainable else None
        for off in self.offsets:
            if gw is not None:
                xs = window(x, off.di, off.dj, self.stride, out_hw).reshape(n, c, -1)
                gw[:, :, off.index] = np.tensordot(gf, xs, axes=([0, 2], [0, 2]))
            gs = np.matmul(self.weight.data[:, :, off.index].T, gf).reshape((n, c) + tuple(out_hw))
            window_adjoint(gs, off.di, off.dj, self.stride, (h, w), out=gx)
        self.weight.grad = gw
        return gx


class DepthwiseConv3x3(Layer):
    kind = "dwconv3x3"

    def __init__(self, channels, stride=1, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng()
        self.channels, self.stride = channels, stride
        self.weight = Param("weight", _he_normal(rng, (channels, 9), 9, dtype))
        self.offsets = kernel_offsets(9)

    def params(self):
        return [self.weight]

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, -(-h // self.stride), -(-w // self.stride))

    def forward(self, x, training=True):
        self._check_channels(x, self.channels)
        h, w = x.shape[2:]
        out_hw = (-(-h // self.stride), -(-w // self.stride))
        y = np.zeros(x.shape[:2] + out_hw, dtype=x.dtype)
        for off in self.offsets:
            y += self.weight.data[:, off.index, None, None] * window(x, off.di, off.dj, self.stride, out_hw)
        self._cache = x
        return y

    def backward(self, grad):
        x = self._take_cache()
        h, w = x.shape[2:]
        out_hw = grad.shape[2:]
        gx = np.zeros_like(x)
        gw = np.zeros_like(self.weight.data) if self.weight.trainable else None
        for off in self.offsets:
            if gw is not None:
                xs = window(x, off.di, off.dj, self.stride, out_hw)
                gw[:, off.index] = np.sum(grad * xs, axis=(0, 2, 3))
            window_adjoint(grad * self.weight.data[:, off.index, None, None], off.di, off.dj, self.stride, (h, w), out=gx)
        self.weight.grad = gw
        return gx


class ActiveShift(Layer):
    """Per-channel learnable fractional shift (2 parameters per channel)."""

    kind = "asl"

    def __init__(self, shifts: ShiftParams, stride=1, name=None):
        super().__init__(name)
        self.channels = shifts.channels
        self.stride = stride
        self.init_mode = shifts.init_mode
        self.shift = Param("shift", shifts.values.copy(), kind="shift", trainable=shifts.trainable)

    def params(self):
        return [self.shift]

    def output_shape(self, shape):
        n, c, h, w = shape
        return (n, c, -(-h // self.stride), -(-w // self.stride))

    def forward(self, x, training=True):
        self._check_channels(x, self.channels)
        y, self._cache = asl_forward(x, self.shift.data, self.stride)
        return y

    def backward(self, grad):
        cache = self._take_cache()
        gx, gtheta = asl_backward(grad, cache, need_theta=self.shift.trainable)
        self.shift.grad = gtheta
        return gx


class BatchNorm(Layer):
    """Batch normalization with a per-channel affine transform.

    Training mode normalizes with batch statistics over (N, H, W) and
    updates running averages ``running = momentum * running + (1 - momentum) * batch``.
    """

    kind = "bn"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32, name=None):
        super().__init__(name)
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Param("gamma", np.ones(channels, dtype=dtype), kind="bn")
        self.beta = Param("beta", np.zeros(channels, dtype=dtype), kind="bn")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.batches_tracked = 0

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "batches_tracked": np.array([self.batches_tracked], dtype=np.int64),
        }

    def load_buffers(self, bufs):
        self.running_mean[...] = bufs["running_mean"]
        self.running_var[...] = bufs["running_var"]
        self.batches_tracked = int(bufs["batches_tracked"][0])

    def forward(self, x, training=True):
        self._check_channels(x, self.channels)
        if training:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.var(axis=(0, 2, 3), dtype=np.float64)
            self.running_mean *= self.momentum
            self.running_mean += (1 - self.momentum) * mean
            self.running_var *= self.momentum
            self.running_var += (1 - self.momentum) * var
            self.batches_tracked += 1
        else:
            if self.batches_tracked == 0:
                raise StateError(f"layer {self.name}: eval mode before any training statistics")
            mean, var = self.running_mean, self.running_var
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)[:, None, None]) * inv_std[:, None, None]
        self._cache = (xhat, inv_std, training)
        return xhat * self.gamma.data[:, None, None] + self.beta.data[:, None, None]

    def backward(self, grad):
        xhat, inv_std, training = self._take_cache()
        g_beta = grad.sum(axis=(0, 2, 3))
        g_gamma = (grad * xhat).sum(axis=(0, 2, 3))
        if self.gamma.trainable:
            self.gamma.grad = g_gamma
        if self.beta.trainable:
            self.beta.grad = g_beta
        scale = (self.gamma.data * inv_std)[:, None, None]
        if not training:
            return grad * scale
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        return scale * (grad - (g_beta[:, None, None] + xhat * g_gamma[:, None, None]) / m)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=True):
        y = np.maximum(x, x.dtype.type(0))
        self._cache = y
        return y

    def backward(self, grad):
        return grad * (self._take_cache() > 0)


def eltwise_sum(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"eltwise sum of mismatched shapes {a.shape} and {b.shape}")
    return a + b


class GlobalAvgPool(Layer):
    kind = "avgpool"

    def output_shape(self, shape):
        return shape[:2]

    def forward(self, x, training=True):
        if x.ndim != 4:
            raise ShapeError(f"layer {self.name}: expected a 4-D input, got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._take_cache()
        return np.broadcast_to((grad / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class Linear(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Param("weight", rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Param("bias", np.zeros(out_features, dtype=dtype), kind="bias")

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        return (shape[0], self.out_features)

    def forward(self, x, training=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"layer {self.name}: expected (N, {self.in_features}) input, got {x.shape}")
        self._cache = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        x = self._take_cache()
        if self.weight.trainable:
            self.weight.grad = grad.T @ x
        if self.bias.trainable:
            self.bias.grad = grad.sum(axis=0)
        return grad @ self.weight.data


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    prob = np.exp(z - logsum[:, None])
    prob[np.arange(n), labels] -= 1.0
    return loss, (prob / n).astype(logits.dtype)


class Sequential(Layer):
    kind = "seq"

    def __init__(self, layers, name=None):
        super().__init__(name)
        self.layers = list(layers)
        seen = {}
        for layer in self.layers:
            base = layer.local_name
            if base in seen:
                seen[base] += 1
                layer.local_name = layer.name = f"{base}{seen[base]}"
            else:
                seen[base] = 0

    def children(self):
        return self.layers

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Residual(Layer):
    """Pre-activation residual block: ``body(pre(x)) + skip``.

    The skip path is ``x`` itself, or ``shortcut(pre(x))`` when a projection
    is needed (stride or width change).
    """

    kind = "residual"

    def __init__(self, body, preact=None, shortcut=None, name=None):
        super().__init__(name)
        self.body, self.preact, self.shortcut = body, preact, shortcut

    def children(self):
        return [c for c in (self.preact, self.body, self.shortcut) if c is not None]

    def output_shape(self, shape):
        if self.preact is not None:
            shape = self.preact.output_shape(shape)
        return self.body.output_shape(shape)

    def forward(self, x, training=True):
        h = self.preact.forward(x, training) if self.preact is not None else x
        skip = self.shortcut.forward(h, training) if self.shortcut is not None else x
        out = self.body.forward(h, training)
        try:
            return eltwise_sum(out, skip)
        except ShapeError as exc:
            raise ShapeError(f"layer {self.name}: {exc}") from None

    def backward(self, grad):
        gh = self.body.backward(grad)
        if self.shortcut is not None:
            gh = gh + self.shortcut.backward(grad)
            return self.preact.backward(gh) if self.preact is not None else gh
        gx = self.preact.backward(gh) if self.preact is not None else gh
        return gx + grad


def walk(layer, prefix=""):
    """Yield (qualified name, layer) for ``layer`` and all its descendants."""
    yield prefix.rstrip("."), layer
    for child in layer.children():
        yield from walk(child, f"{prefix}{child.local_name}.")
