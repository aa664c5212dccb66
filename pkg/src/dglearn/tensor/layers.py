"""Layer set for the numeric engine.

Every layer caches what it needs during ``forward`` so that a following
``backward`` call can return the input gradient and accumulate parameter
gradients. Arrays are plain numpy arrays in NCHW layout (or ``(B, F)`` after
:class:`Flatten`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an input does not fit a layer."""


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum_buffer: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.momentum_buffer = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.value.astype(dtype))
        p.grad = self.grad.astype(dtype)
        p.momentum_buffer = self.momentum_buffer.astype(dtype)
        return p


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name = "layer"

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input: bool = True) -> np.ndarray | None:
        """Accumulate parameter gradients; return the input gradient unless
        ``need_input`` is false."""
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def flops(self, shape: tuple[int, ...]) -> int:
        """Per-sample flop count for an input of ``shape`` (no batch axis)."""
        return 0

    def astype(self, dtype) -> "Layer":
        return self

    def _fail(self, msg: str) -> None:
        raise ShapeError(f"{self.name}: {msg}")


class Conv2d(Layer):
    """Stride-1 convolution with shape-preserving zero padding.

    ``bias=False`` drops the additive term, which is redundant (and has an
    identically zero gradient) when a batch normalization follows.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE,
                 name: str = "conv", bias: bool = True):
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for shape-preserving padding")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.name = name
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        bound = 1.0 / math.sqrt(fan_in)
        self.bias = (Parameter(rng.uniform(-bound, bound, size=out_channels).astype(dtype))
                     if bias else None)
        self._cols = None
        self._in_shape = None

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def _check(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            self._fail(f"expected (C={self.in_channels}, N, N) per sample, got {tuple(shape)}")

    def output_shape(self, shape):
        self._check(shape)
        return (self.out_channels, shape[1], shape[2])

    def flops(self, shape):
        self._check(shape)
        return 2 * self.in_channels * self.out_channels * self.kernel_size ** 2 * shape[1] * shape[2]

    def forward(self, x, train=True):
        if x.ndim != 4:
            self._fail(f"expected 4-D input, got shape {x.shape}")
        self._check(x.shape[1:])
        b, c, h, w = x.shape
        k = self.kernel_size
        p = k // 2
        xt = x.transpose(1, 0, 2, 3)
        if k == 1:
            cols = np.ascontiguousarray(xt).reshape(c, b * h * w)
        else:
            xp = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
            cols = np.empty((c, k, k, b, h, w), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
            cols = cols.reshape(c * k * k, b * h * w)
        self._cols = cols
        self._in_shape = x.shape
        out = self.weight.value.reshape(self.out_channels, -1) @ cols
        if self.bias is not None:
            out += self.bias.value[:, None]
        return np.ascontiguousarray(out.reshape(self.out_channels, b, h, w).transpose(1, 0, 2, 3))

    def backward(self, grad, need_input=True):
        b, c, h, w = self._in_shape
        k = self.kernel_size
        p = k // 2
        g2 = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
        self.weight.grad += (g2 @ self._cols.T).reshape(self.weight.value.shape)
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=1)
        if not need_input:
            self._cols = None
            return None
        gcols = self.weight.value.reshape(self.out_channels, -1).T @ g2
        self._cols = None
        if k == 1:
            return np.ascontiguousarray(gcols.reshape(c, b, h, w).transpose(1, 0, 2, 3))
        gcols = gcols.reshape(c, k, k, b, h, w)
        gxp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + w] += gcols[:, i, j]
        return np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        if self.bias is not None:
            self.bias = self.bias.astype(dtype)
        return self


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE,
                 name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.name = name
        self.weight = Parameter(_kaiming_uniform(rng, (in_features, out_features), in_features, dtype))
        bound = 1.0 / math.sqrt(in_features)
        self.bias = Parameter(rng.uniform(-bound, bound, size=out_features).astype(dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            self._fail(f"expected ({self.in_features},) per sample, got {tuple(shape)}")
        return (self.out_features,)

    def flops(self, shape):
        self.output_shape(shape)
        return 2 * self.in_features * self.out_features

    def forward(self, x, train=True):
        if x.ndim != 2:
            self._fail(f"expected 2-D input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad, need_input=True):
        self.weight.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        self._x = None
        return grad @ self.weight.value.T if need_input else None

    def astype(self, dtype):
        self.weight = self.weight.astype(dtype)
        self.bias = self.bias.astype(dtype)
        return self


class ReLU(Layer):
    name = "relu"

    def __init__(self):
        self._mask = None

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad, need_input=True):
        g = grad * self._mask
        self._mask = None
        return g


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling."""

    name = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size
        self._mask = None
        self._in_shape = None

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] % self.size or shape[2] % self.size:
            self._fail(f"spatial extents {tuple(shape[1:])} not divisible by {self.size}")
        return (shape[0], shape[1] // self.size, shape[2] // self.size)

    def flops(self, shape):
        return int(np.prod(shape))

    def forward(self, x, train=True):
        self.output_shape(x.shape[1:])
        s = self.size
        b, c, h, w = x.shape
        blocks = x.reshape(b, c, h // s, s, w // s, s)
        out = blocks.max(axis=(3, 5))
        # route each output's gradient to the first maximal entry of its window
        hit = blocks == out[:, :, :, None, :, None]
        first = np.cumsum(np.cumsum(hit, axis=3), axis=5)
        self._mask = hit & (first == 1)
        self._in_shape = x.shape
        return out

    def backward(self, grad, need_input=True):
        b, c, h, w = self._in_shape
        g = self._mask * grad[:, :, :, None, :, None]
        self._mask = None
        return g.reshape(b, c, h, w)


class AvgPool2d(Layer):
    """Average pooling down to a fixed ``target`` spatial extent."""

    name = "avgpool"

    def __init__(self, target: int):
        self.target = target
        self._in_shape = None

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] % self.target or shape[2] % self.target:
            self._fail(f"spatial extents {tuple(shape[1:])} not reducible to {self.target}x{self.target}")
        return (shape[0], self.target, self.target)

    def flops(self, shape):
        return int(np.prod(shape))

    def forward(self, x, train=True):
        self.output_shape(x.shape[1:])
        b, c, h, w = x.shape
        t = self.target
        self._in_shape = x.shape
        return x.reshape(b, c, t, h // t, t, w // t).mean(axis=(3, 5))

    def backward(self, grad, need_input=True):
        b, c, h, w = self._in_shape
        t = self.target
        fh, fw = h // t, w // t
        g = grad[:, :, :, None, :, None] / (fh * fw)
        return np.broadcast_to(g, (b, c, t, fh, t, fw)).reshape(b, c, h, w)


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    Training uses the current batch statistics and updates running estimates
    with momentum 0.1; evaluation uses the running estimates.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE, name: str = "batchnorm"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.scale = Parameter(np.ones(channels, dtype=dtype))
        self.shift = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.scale, self.shift]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            self._fail(f"expected {self.channels} channels, got shape {tuple(shape)}")
        return tuple(shape)

    def flops(self, shape):
        return 4 * int(np.prod(shape))

    def forward(self, x, train=True):
        self.output_shape(x.shape[1:])
        if train:
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[None, :, None, None]
            var = np.einsum("bchw,bchw->c", xc, xc) / (x.shape[0] * x.shape[2] * x.shape[3])
            n = x.shape[0] * x.shape[2] * x.shape[3]
            m = self.momentum
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return xhat * self.scale.value[None, :, None, None] + self.shift.value[None, :, None, None]

    def backward(self, grad, need_input=True):
        xhat, inv_std, train = self._cache
        self.scale.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.shift.grad += grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.scale.value[None, :, None, None]
        self._cache = None
        if not need_input:
            return None
        if not train:
            return gxhat * inv_std[None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) * inv_std[None, :, None, None]

    def astype(self, dtype):
        self.scale = self.scale.astype(dtype)
        self.shift = self.shift.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self


class Flatten(Layer):
    name = "flatten"

    def __init__(self):
        self._in_shape = None

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=True):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input=True):
        return grad.reshape(self._in_shape)


class Sequential(Layer):
    name = "sequential"

    def __init__(self, layers: list[Layer] | None = None):
        self.layers = list(layers or [])

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return tuple(shape)

    def flops(self, shape):
        total = 0
        for layer in self.layers:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad, need_input=True):
        first = 0
        if not need_input:
            # layers ahead of the first parameterized one need no backward at all
            first = next((i for i, layer in enumerate(self.layers) if layer.params()),
                         len(self.layers))
        for i in range(len(self.layers) - 1, first - 1, -1):
            grad = self.layers[i].backward(grad, need_input or i > first)
        return grad if need_input else None

    def astype(self, dtype):
        self.layers = [layer.astype(dtype) for layer in self.layers]
        return self

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)


def layer_forward(x: np.ndarray, layer: Layer, train: bool = True) -> np.ndarray:
    """Run one layer (or a stack) forward, recording its backward cache."""
    return layer.forward(x, train)
