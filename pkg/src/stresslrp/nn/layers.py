"""Layer definitions.

Every layer works on batches with a leading sample axis. ``forward``
returns the output and a cache that ``backward`` consumes; ``backward``
returns the input gradient and a dict of parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, ShapeError
from . import functional as F

LAYER_KINDS = ("conv2d", "dense", "relu", "avg_pool", "max_pool", "batch_norm", "flatten")


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Layer:
    kind = ""
    param_names: tuple = ()
    buffer_names: tuple = ()

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def get(self, name):
        return getattr(self, name)

    def arrays(self):
        return {n: getattr(self, n) for n in self.param_names + self.buffer_names}

    def with_arrays(self, **arrays):
        return replace(self, **arrays)

    def config(self) -> dict:
        return {"kind": self.kind}

    def backward(self, dy, cache):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: tuple = (0, 0)
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv2d weight {self.weight.shape} / bias {self.bias.shape} inconsistent")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        pad = _pair(self.padding)
        if min(pad) < 0:
            raise ConfigError("padding must be >= 0")
        object.__setattr__(self, "padding", pad)

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.weight.shape[1]:
            raise ShapeError(f"conv2d expects {self.weight.shape[1]} channels, got {c}")
        kh, kw = self.kernel
        ho = F.out_size(h, kh, self.stride, self.padding[0])
        wo = F.out_size(w, kw, self.stride, self.padding[1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input {input_shape}")
        return self.weight.shape[0], ho, wo

    def forward(self, x, training=False):
        y, cols = F.conv2d(x, self.weight, self.bias, self.stride, self.padding, return_cols=True)
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        dw, db = F.conv2d_weight_grad(dy, cols, self.weight.shape)
        dx = F.conv2d_input_grad(dy, self.weight, x_shape, self.stride, self.padding)
        return dx, {"weight": dw, "bias": db}

    def config(self):
        return {"kind": self.kind, "stride": self.stride, "padding": list(self.padding),
                "weight_shape": list(self.weight.shape)}


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    kind = "dense"
    param_names = ("weight", "bias")

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense weight {self.weight.shape} / bias {self.bias.shape} inconsistent")

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.weight.shape[1],):
            raise ShapeError(f"dense expects input ({self.weight.shape[1]},), got {tuple(input_shape)}")
        return (self.weight.shape[0],)

    def forward(self, x, training=False):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, x):
        return dy @ self.weight, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}

    def config(self):
        return {"kind": self.kind, "weight_shape": list(self.weight.shape)}


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


@dataclass(frozen=True, eq=False)
class _Pool(Layer):
    window: tuple = (2, 2)
    stride: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "window", _pair(self.window))
        if self.stride is None:
            object.__setattr__(self, "stride", self.window[0])
        if self.stride < 1 or min(self.window) < 1:
            raise ConfigError("pool window and stride must be >= 1")

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W) input, got {tuple(input_shape)}")
        c, h, w = input_shape
        ho = F.out_size(h, self.window[0], self.stride, 0)
        wo = F.out_size(w, self.window[1], self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.kind} window {self.window} does not fit input {tuple(input_shape)}")
        return c, ho, wo

    def config(self):
        return {"kind": self.kind, "window": list(self.window), "stride": self.stride}


@dataclass(frozen=True, eq=False)
class AvgPool(_Pool):
    kind = "avg_pool"

    def forward(self, x, training=False):
        return F.avg_pool(x, self.window, self.stride), x.shape

    def backward(self, dy, x_shape):
        return F.avg_pool_input_grad(dy, x_shape, self.window, self.stride), {}


@dataclass(frozen=True, eq=False)
class MaxPool(_Pool):
    kind = "max_pool"

    def forward(self, x, training=False):
        y, arg = F.max_pool(x, self.window, self.stride)
        return y, (x.shape, arg)

    def backward(self, dy, cache):
        x_shape, arg = cache
        return F.max_pool_scatter(dy, arg, x_shape, self.window, self.stride), {}


@dataclass(frozen=True, eq=False)
class BatchNorm(Layer):
    """Per-channel normalization (axis 1); batch statistics in training mode."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9
    kind = "batch_norm"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __post_init__(self):
        n = self.gamma.shape
        if len(n) != 1 or any(a.shape != n for a in (self.beta, self.running_mean, self.running_var)):
            raise ShapeError("batch_norm parameter shapes differ")

    @property
    def channels(self):
        return self.gamma.shape[0]

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"batch_norm over {self.channels} channels, input {tuple(input_shape)}")
        return tuple(input_shape)

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training=False):
        s = self._bshape(x)
        if training:
            axes = (0,) + tuple(range(2, x.ndim))
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(s)) * inv.reshape(s)
        y = self.gamma.reshape(s) * xhat + self.beta.reshape(s)
        return y, (xhat, inv, training, mean, var)

    def backward(self, dy, cache):
        xhat, inv, training, _, _ = cache
        s = self._bshape(dy)
        axes = (0,) + tuple(range(2, dy.ndim))
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        g = (self.gamma * inv).reshape(s)
        if training:
            m = dy.size / dy.shape[1]
            dx = g / m * (m * dy - dbeta.reshape(s) - xhat * dgamma.reshape(s))
        else:
            dx = g * dy
        return dx, {"gamma": dgamma, "beta": dbeta}

    def updated_running(self, cache):
        """Running statistics after one training batch."""
        _, _, _, mean, var = cache
        m = self.momentum
        return {"running_mean": (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype),
                "running_var": (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)}

    def config(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps, "momentum": self.momentum}


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(math.prod(input_shape)),)

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, x_shape):
        return dy.reshape(x_shape), {}


def conv2d(in_ch, out_ch, kernel, rng, stride=1, padding="valid", dtype=np.float32):
    """Conv layer with fan-in scaled uniform initialization."""
    kh, kw = _pair(kernel)
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("'same' padding needs stride 1 and odd kernels")
        pad = (kh // 2, kw // 2)
    elif padding == "valid":
        pad = (0, 0)
    else:
        pad = _pair(padding)
    limit = math.sqrt(6.0 / (in_ch * kh * kw))
    w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kh, kw)).astype(dtype)
    return Conv2D(w, np.zeros(out_ch, dtype=dtype), stride, pad)


def dense(n_in, n_out, rng, dtype=np.float32):
    limit = math.sqrt(6.0 / n_in)
    return Dense(rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype), np.zeros(n_out, dtype=dtype))


def batch_norm(channels, dtype=np.float32, eps=1e-5, momentum=0.9):
    return BatchNorm(np.ones(channels, dtype), np.zeros(channels, dtype), np.zeros(channels, dtype),
                     np.ones(channels, dtype), eps, momentum)


def layer_from_config(cfg: dict, arrays: dict) -> Layer:
    kind = cfg["kind"]
    if kind == "conv2d":
        return Conv2D(arrays["weight"], arrays["bias"], cfg["stride"], tuple(cfg["padding"]))
    if kind == "dense":
        return Dense(arrays["weight"], arrays["bias"])
    if kind == "relu":
        return ReLU()
    if kind == "avg_pool":
        return AvgPool(tuple(cfg["window"]), cfg["stride"])
    if kind == "max_pool":
        return MaxPool(tuple(cfg["window"]), cfg["stride"])
    if kind == "batch_norm":
        return BatchNorm(arrays["gamma"], arrays["beta"], arrays["running_mean"], arrays["running_var"],
                         cfg["eps"], cfg["momentum"])
    if kind == "flatten":
        return Flatten()
    raise ConfigError(f"unknown layer kind {kind!r}")


def array_shapes(cfg: dict) -> dict:
    """Parameter and buffer shapes implied by a layer config, in storage order."""
    kind = cfg["kind"]
    if kind in ("conv2d", "dense"):
        w = tuple(cfg["weight_shape"])
        return {"weight": w, "bias": (w[0],)}
    if kind == "batch_norm":
        c = (cfg["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}
