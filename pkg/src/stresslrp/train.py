"""Focal-loss training with Adam, step learning-rate decay and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DatasetSplit, Sample
from .dsp import stft_magnitude, zscore
from .errors import ConfigError, DivergenceError, NumericError, ShapeError
from .nn import network as netmod
from .nn.io import load_weights, save_weights
from .nn.network import NetworkSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 2.0
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.lr_decay_every < 1:
            raise ConfigError("epochs must be >= 0 and lr_decay_every >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train options {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train_loss"]), list(d["val_accuracy"]), list(d["learning_rate"]))


# ---------------------------------------------------------------------------
# loss and optimizer


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def focal_loss_batch(logits, labels, gamma=2.0):
    """Mean focal loss ``-(1 - p_t)^gamma log p_t`` and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    n = z.shape[0]
    logp = _log_softmax(z)
    p = np.exp(logp)
    rows = np.arange(n)
    logpt = logp[rows, labels]
    pt = p[rows, labels]
    # 1 - p_t as the sum of the other probabilities keeps precision near p_t = 1
    q = p.sum(axis=1) - pt
    q = np.where(q < 0, 0.0, q)
    loss = -(q**gamma) * logpt
    # dL/dp_t, written to stay finite at q = 0
    if gamma == 0:
        dl_dpt = -1.0 / pt
    else:
        safe_q = np.where(q > 0, q, 1.0)
        dl_dpt = np.where(q > 0, gamma * safe_q ** (gamma - 1) * logpt, 0.0) - q**gamma / pt
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    grad = (dl_dpt * pt)[:, None] * (onehot - p)
    return float(loss.mean()), grad / n


def focal_loss(logits, label: int, gamma: float = 2.0):
    """Focal loss of a single logit vector; returns ``(loss, dloss_dlogits)``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError(f"expected a logit vector, got shape {z.shape}")
    loss, grad = focal_loss_batch(z[None], [label], gamma)
    return loss, grad[0]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, config: TrainConfig = TrainConfig(), lr: float | None = None):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("parameter and gradient shapes differ")
    lr = config.learning_rate if lr is None else lr
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p.append((p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class TensorSplit:
    """Array-form split: inputs ``(N, C, H, W)`` and integer labels."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


def sample_features(sample: Sample, dtype=np.float32) -> np.ndarray:
    """z-scored magnitude spectrogram with a leading channel axis."""
    return zscore(stft_magnitude(sample.clip)).values[None].astype(dtype)


def sample_arrays(samples: Sequence[Sample], dtype=np.float32):
    if not samples:
        return np.zeros((0, 1, 161, 49), dtype=dtype), np.zeros(0, dtype=np.int64)
    x = np.stack([sample_features(s, dtype) for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def prepare_arrays(split: DatasetSplit) -> TensorSplit:
    xt, yt = sample_arrays(split.train)
    xv, yv = sample_arrays(split.validation)
    return TensorSplit(xt, yt, xv, yv)


# ---------------------------------------------------------------------------
# training


def _params(net: NetworkSpec) -> list:
    return [layer.get(n) for layer in net.layers for n in layer.param_names]


def _with_params(net: NetworkSpec, params: list, buffers: dict) -> NetworkSpec:
    it = iter(params)
    new = []
    for k, layer in enumerate(net.layers):
        upd = {n: next(it) for n in layer.param_names}
        upd.update(buffers.get(k, {}))
        new.append(layer.with_arrays(**upd) if upd else layer)
    return NetworkSpec(new, net.input_shape, net.n_classes)


def loss_and_grads(net: NetworkSpec, x, y, gamma: float, training: bool = True):
    """Focal loss over a batch, per-parameter gradients, and the forward caches."""
    logits, caches = netmod.forward_train(net, x, training=training)
    loss, dlogits = focal_loss_batch(logits, y, gamma)
    _, grads = netmod.backward(net, caches, dlogits.astype(logits.dtype))
    flat = [grads[k][n] for k, layer in enumerate(net.layers) for n in layer.param_names]
    return loss, flat, caches


def train(net: NetworkSpec, split, config: TrainConfig = TrainConfig(), history: TrainHistory | None = None,
          start_epoch: int = 0, progress=None):
    """Train for ``config.epochs`` epochs and return ``(best_net, history)``.

    ``split`` is a :class:`DatasetSplit` or a :class:`TensorSplit`. The net
    with the highest validation accuracy (latest on ties) is returned; with
    no validation data, the final net. ``history``/``start_epoch`` continue
    a run loaded from a checkpoint.
    """
    data = prepare_arrays(split) if isinstance(split, DatasetSplit) else split
    if data.x_train.shape[0] == 0:
        raise ConfigError("training split is empty")
    history = TrainHistory() if history is None else TrainHistory.from_dict(history.to_dict())
    if config.epochs == 0:
        return net, history
    rng = np.random.default_rng([config.seed, start_epoch])
    state = AdamState.zeros_like(_params(net))
    have_val = data.x_val.shape[0] > 0
    best_net, best_acc = net, (max(history.val_accuracy) if history.val_accuracy else -1.0)
    n = data.x_train.shape[0]
    for e in range(config.epochs):
        epoch = start_epoch + e
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, a in enumerate(range(0, n, config.batch_size)):
            idx = order[a : a + config.batch_size]
            loss, grads, caches = loss_and_grads(net, data.x_train[idx], data.y_train[idx], config.gamma)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            params, state = adam_step(_params(net), grads, state, config, lr)
            buffers = {k: layer.updated_running(caches[k]) for k, layer in enumerate(net.layers)
                       if layer.kind == "batch_norm"}
            net = _with_params(net, params, buffers)
            total += loss * idx.size
            count += idx.size
        acc = accuracy(net, data.x_val, data.y_val) if have_val else float("nan")
        history.train_loss.append(total / count)
        history.val_accuracy.append(acc)
        history.learning_rate.append(lr)
        logger.info("epoch %d loss %.4f val_acc %.4f lr %.2e", epoch, total / count, acc, lr)
        if progress is not None:
            progress(epoch, total / count, acc)
        if not have_val or acc >= best_acc:
            best_net, best_acc = net, acc
    return best_net, history


def accuracy(net: NetworkSpec, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty set")
    pred = netmod.predict(net, x).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def evaluate(net: NetworkSpec, samples) -> float:
    """Fraction of argmax-correct predictions over Samples or an ``(x, y)`` pair."""
    if isinstance(samples, tuple):
        x, y = samples
    else:
        x, y = sample_arrays(list(samples))
    return accuracy(net, x, y)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: NetworkSpec, config: TrainConfig, epoch: int, history: TrainHistory):
    """Write ``<path>`` (weights) and ``<path>.json`` (config, epoch, history)."""
    path = Path(path)
    save_weights(net, path)
    side = {"train_config": asdict(config), "epoch": epoch, "history": history.to_dict()}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Return ``(net, config, epoch, history)``."""
    net = load_weights(path)
    with open(str(path) + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    return net, TrainConfig.from_dict(side["train_config"]), side["epoch"], TrainHistory.from_dict(side["history"])
