"""Layer stacks, traced inference, batch-norm folding and architecture builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import CanonizationError, ConfigError, ShapeError
from . import layers as L

N_CLASSES = 2
INPUT_SHAPE = (1, 161, 49)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Ordered layers plus the per-sample input shape ``(C, H, W)`` or ``(D,)``.

    Shapes are composed at construction, so a network that builds never hits a
    shape error at inference for inputs of ``input_shape``.
    """

    layers: tuple
    input_shape: tuple
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = [self.input_shape]
        for k, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {k} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.n_classes,):
            raise ShapeError(f"network outputs {shapes[-1]}, expected ({self.n_classes},)")
        object.__setattr__(self, "shapes", tuple(shapes))

    def __len__(self):
        return len(self.layers)

    def kinds(self) -> list:
        return [layer.kind for layer in self.layers]

    def astype(self, dtype) -> "NetworkSpec":
        new = [layer.with_arrays(**{k: v.astype(dtype) for k, v in layer.arrays().items()})
               if layer.arrays() else layer for layer in self.layers]
        return NetworkSpec(new, self.input_shape, self.n_classes)

    def equals(self, other: "NetworkSpec") -> bool:
        """Structural and bitwise parameter equality."""
        if self.input_shape != other.input_shape or self.n_classes != other.n_classes:
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.config() != b.config():
                return False
            aa, bb = a.arrays(), b.arrays()
            if aa.keys() != bb.keys():
                return False
            for k in aa:
                if aa[k].dtype != bb[k].dtype or aa[k].tobytes() != bb[k].tobytes():
                    return False
        return True


@dataclass(frozen=True, eq=False)
class TraceEntry:
    index: int
    layer: L.Layer
    input: np.ndarray
    output: np.ndarray


class ForwardTrace(list):
    """Per-layer inputs and outputs of one inference pass (no batch axis)."""

    @property
    def input(self):
        return self[0].input

    @property
    def logits(self):
        return self[-1].output


def _as_batch(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None]
    if len(net.input_shape) == 3 and net.input_shape[0] == 1 and x.shape == net.input_shape[1:]:
        return x[None, None]
    if x.shape[1:] == net.input_shape:
        return x
    if len(net.input_shape) == 3 and net.input_shape[0] == 1 and x.shape[1:] == net.input_shape[1:]:
        return x[:, None]
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def forward(net: NetworkSpec, x: np.ndarray):
    """Inference pass on one input; returns ``(logits, trace)``."""
    h = _as_batch(net, x)
    if h.shape[0] != 1:
        raise ShapeError("forward takes a single input; use predict for batches")
    trace = ForwardTrace()
    for k, layer in enumerate(net.layers):
        y, _ = layer.forward(h, training=False)
        trace.append(TraceEntry(k, layer, h[0], y[0]))
        h = y
    return h[0], trace


def predict(net: NetworkSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched inference logits ``(N, n_classes)``."""
    xb = _as_batch(net, x)
    out = []
    for a in range(0, xb.shape[0], batch_size):
        h = xb[a : a + batch_size]
        for layer in net.layers:
            h, _ = layer.forward(h, training=False)
        out.append(h)
    return np.concatenate(out) if out else np.zeros((0, net.n_classes))


def forward_train(net: NetworkSpec, x: np.ndarray, training: bool = True):
    h = _as_batch(net, x)
    caches = []
    for layer in net.layers:
        h, cache = layer.forward(h, training=training)
        caches.append(cache)
    return h, caches


def backward(net: NetworkSpec, caches: list, dout: np.ndarray):
    """Backpropagate ``dout``; returns ``(dx, per-layer gradient dicts)``."""
    grads = [None] * len(net.layers)
    g = dout
    for k in range(len(net.layers) - 1, -1, -1):
        g, grads[k] = net.layers[k].backward(g, caches[k])
    return g, grads


def fold_batchnorm(net: NetworkSpec) -> NetworkSpec:
    """Merge every batch-norm layer into the conv/dense layer right before it."""
    out = []
    for k, layer in enumerate(net.layers):
        if layer.kind != "batch_norm":
            out.append(layer)
            continue
        if not out or out[-1].kind not in ("conv2d", "dense"):
            prev = out[-1].kind if out else "input"
            raise CanonizationError(f"batch_norm at layer {k} follows {prev}, not conv2d/dense")
        prev = out.pop()
        scale = (layer.gamma / np.sqrt(layer.running_var + layer.eps)).astype(np.float64)
        w = prev.weight.astype(np.float64) * scale.reshape((-1,) + (1,) * (prev.weight.ndim - 1))
        b = (prev.bias.astype(np.float64) - layer.running_mean) * scale + layer.beta
        dt = prev.weight.dtype
        out.append(prev.with_arrays(weight=w.astype(dt), bias=b.astype(dt)))
    return NetworkSpec(out, net.input_shape, net.n_classes)


def center_logits(net: NetworkSpec) -> NetworkSpec:
    """Subtract the across-class mean from the final dense layer.

    Softmax is unchanged, and every logit becomes its difference from the
    class average, so the predicted class always has a positive logit.
    """
    last = net.layers[-1]
    if last.kind != "dense":
        raise CanonizationError(f"final layer is {last.kind}, expected dense")
    w = last.weight.astype(np.float64)
    b = last.bias.astype(np.float64)
    dt = last.weight.dtype
    new = last.with_arrays(weight=(w - w.mean(axis=0)).astype(dt), bias=(b - b.mean()).astype(dt))
    return NetworkSpec(net.layers[:-1] + (new,), net.input_shape, net.n_classes)


def canonize(net: NetworkSpec) -> NetworkSpec:
    """Batch-norm folding followed by logit centering, as used before explaining."""
    return center_logits(fold_batchnorm(net))


def has_batchnorm(net: NetworkSpec) -> bool:
    return any(layer.kind == "batch_norm" for layer in net.layers)


# ---------------------------------------------------------------------------
# builders


def lenet5(input_shape=INPUT_SHAPE, n_classes=N_CLASSES, seed=0, batch_norm=True, channels=(6, 16, 120),
           hidden=84, dtype=np.float32) -> NetworkSpec:
    """Three valid 5x5 convolutions with average pooling between them, then two dense layers."""
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    for k, ch in enumerate(channels):
        layers.append(L.conv2d(c, ch, 5, rng, dtype=dtype))
        if batch_norm:
            layers.append(L.batch_norm(ch, dtype))
        layers.append(L.ReLU())
        if k < len(channels) - 1:
            layers.append(L.AvgPool((2, 2)))
        c = ch
    layers.append(L.Flatten())
    return _with_head(layers, input_shape, n_classes, (hidden,), rng, dtype)


VGG_MINI = (8, "M", 16, "M", 32, "M", 32, "M")
VGG11 = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")
VGG16 = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def vgg(cfg=VGG_MINI, input_shape=INPUT_SHAPE, n_classes=N_CLASSES, seed=0, batch_norm=True,
        hidden=(64, 64), dtype=np.float32) -> NetworkSpec:
    """VGG-style stack: same-padded 3x3 convolutions, 2x2 max pooling at each ``"M"``, dense head."""
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    for item in cfg:
        if item == "M":
            layers.append(L.MaxPool((2, 2)))
            continue
        layers.append(L.conv2d(c, int(item), 3, rng, padding="same", dtype=dtype))
        if batch_norm:
            layers.append(L.batch_norm(int(item), dtype))
        layers.append(L.ReLU())
        c = int(item)
    layers.append(L.Flatten())
    return _with_head(layers, input_shape, n_classes, hidden, rng, dtype)


def _with_head(layers, input_shape, n_classes, hidden, rng, dtype):
    # size the first dense layer from the composed feature shape
    shape = tuple(input_shape)
    for k, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {k} ({layer.kind}): {exc}") from None
    n = shape[0]
    for h in hidden:
        layers += [L.dense(n, h, rng, dtype), L.ReLU()]
        n = h
    layers.append(L.dense(n, n_classes, rng, dtype))
    return NetworkSpec(layers, input_shape, n_classes)


ARCHITECTURES = {
    "lenet5": lambda **kw: lenet5(**kw),
    "vgg_mini": lambda **kw: vgg(VGG_MINI, **kw),
    "vgg11": lambda **kw: vgg(VGG11, hidden=(4096, 4096), **kw),
    "vgg16": lambda **kw: vgg(VGG16, hidden=(4096, 4096), **kw),
}


def build(name: str, **kwargs) -> NetworkSpec:
    try:
        return ARCHITECTURES[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
