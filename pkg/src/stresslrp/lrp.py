"""Layer-wise relevance propagation over a forward trace.

Each conv/dense/avg-pool layer is handled as a linear map ``z = W x + b``
together with its adjoint, so one routine covers all rules:

* ``z``:          R_i = x_i * sum_j W_ij R_j / z_j
* ``epsilon``:    same with z_j + eps * sign(z_j), sign(0) = +1
* ``alphabeta``:  positive and negative contribution pools, weighted by
                  alpha and beta (alpha + beta = 1); an empty pool passes nothing
* ``flat_identity``: each output's relevance spread evenly over the inputs
                  it is connected to (nonzero weights), ignoring activations

Biases enter the denominators but keep no relevance. ReLU passes
relevance through, max pooling routes it to the window winner, and
flatten only reshapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import AssignmentError, CanonizationError, ConfigError, SingularityError
from .nn import functional as F
from .nn.network import ForwardTrace, NetworkSpec

RULES = ("z", "epsilon", "alphabeta", "flat_identity", "composite")
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class RuleConfig:
    rule: str = "epsilon"
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 1.0
    beta: float = 0.0
    composite_map: tuple | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}; choose from {RULES}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.alpha < 0 or self.beta < 0 or abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ConfigError(f"alpha, beta must be nonnegative with alpha + beta = 1, got {self.alpha}, {self.beta}")

    @property
    def name(self) -> str:
        if self.rule == "alphabeta":
            return f"alpha{self.alpha:g}"
        return self.rule


Z = RuleConfig("z")
EPSILON = RuleConfig("epsilon")
ALPHA1 = RuleConfig("alphabeta", alpha=1.0, beta=0.0)
FLAT = RuleConfig("flat_identity")
COMPOSITE = RuleConfig("composite")

NAMED_RULES = {"z": Z, "epsilon": EPSILON, "alpha1": ALPHA1, "flat_identity": FLAT, "composite": COMPOSITE}


def rule_from_name(name: str, epsilon: float = DEFAULT_EPSILON) -> RuleConfig:
    if name.startswith("alpha") and name != "alpha1":
        try:
            a = float(name[5:])
        except ValueError:
            raise ConfigError(f"bad alpha rule name {name!r}") from None
        return RuleConfig("alphabeta", epsilon, a, 1.0 - a)
    try:
        return replace(NAMED_RULES[name], epsilon=epsilon)
    except KeyError:
        raise ConfigError(f"unknown rule {name!r}; choose from {sorted(NAMED_RULES)}") from None


@dataclass(frozen=True, eq=False)
class RelevanceMap:
    """Input-shaped relevance; ``layers[k]`` is the relevance at the input of layer k."""

    values: np.ndarray
    target: int
    rule: str
    layers: list = field(default_factory=list, repr=False)

    @property
    def matrix(self) -> np.ndarray:
        v = self.values
        return v[0] if v.ndim == 3 and v.shape[0] == 1 else v

    @property
    def total(self) -> float:
        return float(self.values.sum())


def composite_assignment(net) -> list:
    """Per-layer rules: flat for the first two convs, alpha1 for later convs, epsilon for dense.

    Pooling layers take the rule of the closest preceding conv; relu and
    flatten get ``None``.
    """
    layers = net.layers if isinstance(net, NetworkSpec) else [getattr(e, "layer", e) for e in net]
    kinds = [layer.kind for layer in layers]
    n_conv, n_dense = kinds.count("conv2d"), kinds.count("dense")
    if n_conv < 2 or n_dense < 1:
        raise AssignmentError(f"composite rule needs >= 2 conv and >= 1 dense layers, got {n_conv} and {n_dense}")
    out, seen, current = [], 0, None
    for kind in kinds:
        if kind == "conv2d":
            current = FLAT if seen < 2 else ALPHA1
            seen += 1
            out.append(current)
        elif kind == "dense":
            out.append(EPSILON)
        elif kind in ("avg_pool", "max_pool"):
            out.append(current)
        else:
            out.append(None)
    return out


def weighted_rule_names(net) -> list:
    layers = net.layers if isinstance(net, NetworkSpec) else net
    return [r.name for layer, r in zip(layers, composite_assignment(net)) if layer.kind in ("conv2d", "dense")]


# ---------------------------------------------------------------------------
# linear maps


def _linear_ops(layer, x_shape):
    """``(W, b, fwd, adj)`` for a layer seen as z = fwd(x, W) + b."""
    if layer.kind == "dense":
        w = layer.weight.astype(np.float64)
        return w, layer.bias.astype(np.float64), (lambda x, w: w @ x), (lambda s, w: w.T @ s)
    if layer.kind == "conv2d":
        stride, pad = layer.stride, layer.padding
        shape = (1,) + tuple(x_shape)

        def fwd(x, w):
            return F.conv2d(x[None], w, None, stride, pad)[0]

        def adj(s, w):
            return F.conv2d_input_grad(s[None], w, shape, stride, pad)[0]

        return layer.weight.astype(np.float64), layer.bias.astype(np.float64), fwd, adj
    if layer.kind == "avg_pool":
        k, stride = layer.window, layer.stride
        shape = (1,) + tuple(x_shape)
        area = k[0] * k[1]

        # a depthwise convolution with a scalar weight shared by every tap
        def fwd(x, w):
            return w * area * F.avg_pool(x[None], k, stride)[0]

        def adj(s, w):
            return w * area * F.avg_pool_input_grad(s[None], shape, k, stride)[0]

        return np.float64(1.0 / area), None, fwd, adj
    raise ValueError(layer.kind)


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def propagate_linear(x, weight, bias, r_out, fwd, adj, rule: RuleConfig, layer_index=None):
    """Redistribute ``r_out`` onto the inputs ``x`` of one linear layer."""
    if rule.rule == "flat_identity":
        mask = (np.asarray(weight) != 0).astype(np.float64)
        count = fwd(np.ones_like(x), mask)
        return adj(_safe_div(r_out, count), mask)
    if rule.rule in ("z", "epsilon"):
        z = fwd(x, weight)
        if bias is not None:
            z = z + bias.reshape((-1,) + (1,) * (z.ndim - 1))
        if rule.rule == "epsilon":
            den = z + rule.epsilon * np.where(z >= 0, 1.0, -1.0)
        else:
            bad = (z == 0) & (r_out != 0)
            if bad.any():
                unit = tuple(int(i) for i in np.argwhere(bad)[0])
                raise SingularityError(f"z-rule: zero preactivation at layer {layer_index}, unit {unit}")
            den = z
        return x * adj(_safe_div(r_out, den), weight)
    if rule.rule == "alphabeta":
        xp, xn = np.maximum(x, 0), np.minimum(x, 0)
        wp, wn = np.maximum(weight, 0), np.minimum(weight, 0)
        zp = fwd(xp, wp) + fwd(xn, wn)
        zn = fwd(xp, wn) + fwd(xn, wp)
        if bias is not None:
            b = bias.reshape((-1,) + (1,) * (zp.ndim - 1))
            zp = zp + np.maximum(b, 0)
            zn = zn + np.minimum(b, 0)
        r_in = np.zeros_like(x)
        if rule.alpha:
            sp = _safe_div(rule.alpha * r_out, zp)
            r_in += xp * adj(sp, wp) + xn * adj(sp, wn)
        if rule.beta:
            sn = _safe_div(rule.beta * r_out, zn)
            r_in += xp * adj(sn, wn) + xn * adj(sn, wp)
        return r_in
    raise ConfigError(f"rule {rule.rule!r} cannot be applied to a single layer")


def _layer_rules(trace, rules: RuleConfig) -> list:
    if rules.rule != "composite":
        return [rules] * len(trace)
    if rules.composite_map is not None:
        if len(rules.composite_map) != len(trace):
            raise ConfigError("composite_map length differs from layer count")
        return list(rules.composite_map)
    return composite_assignment([e.layer for e in trace])


def relevance(trace: ForwardTrace, target_class: int, rules: RuleConfig = COMPOSITE) -> RelevanceMap:
    """Propagate the target logit back to the input.

    The output relevance is the raw target-class logit with all other
    outputs zero. Returns the input map with every intermediate relevance
    attached in ``layers``.
    """
    if any(e.layer.kind == "batch_norm" for e in trace):
        raise CanonizationError("trace contains batch_norm; fold it into the preceding layer first")
    logits = np.asarray(trace[-1].output, dtype=np.float64)
    if not 0 <= target_class < logits.size:
        raise ConfigError(f"target_class {target_class} out of range for {logits.size} outputs")
    per_layer = _layer_rules(trace, rules)
    r = np.zeros_like(logits)
    r[target_class] = logits[target_class]
    stack = [r]
    for entry, rule in zip(reversed(trace), reversed(per_layer)):
        layer = entry.layer
        x = np.asarray(entry.input, dtype=np.float64)
        if layer.kind in ("relu",):
            pass
        elif layer.kind == "flatten":
            r = r.reshape(x.shape)
        elif layer.kind == "max_pool":
            _, arg = F.max_pool(x[None], layer.window, layer.stride)
            r = F.max_pool_scatter(r[None], arg, (1,) + x.shape, layer.window, layer.stride)[0]
        else:
            if rule is None:
                raise ConfigError(f"no rule assigned to layer {entry.index} ({layer.kind})")
            w, b, fwd, adj = _linear_ops(layer, x.shape)
            r = propagate_linear(x, w, b, r, fwd, adj, rule, entry.index)
        stack.append(r)
    stack.reverse()
    return RelevanceMap(stack[0], target_class, rules.name, stack)


# ---------------------------------------------------------------------------
# export


def export_map(rmap: RelevanceMap, stem) -> dict:
    """Write ``<stem>.csv``, ``<stem>.png`` and ``<stem>.json``; return the sidecar dict.

    The PNG is 8-bit grayscale, min-max scaled, with frequency increasing
    upwards (row 0 of the matrix is the bottom image row).
    """
    from PIL import Image

    stem = Path(stem)
    m = rmap.matrix
    np.savetxt(f"{stem}.csv", m, delimiter=",", fmt="%.9e")
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    img = np.round(scaled[::-1] * 255).astype(np.uint8)
    Image.fromarray(img).save(f"{stem}.png", format="PNG", optimize=False, compress_level=6)
    side = {"min": lo, "max": hi, "shape": list(m.shape), "rule": rmap.rule, "target": rmap.target,
            "origin": "lower"}
    with open(f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return side


def read_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
