"""Feed-forward networks with entrywise activations and exact reverse-mode gradients.

Inputs are batch-major: a minibatch ``X`` has shape (batch, features) and a
layer with weight ``W`` (out x in) maps it to ``sigma(X W^T + b)``. Any layer
object works as long as it exposes ``activation``, ``bias``, ``in_features``,
``out_features``, ``weight()``, ``linear(z)`` (= z W^T) and
``linear_transpose(d)`` (= d W).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

KINDS = ("leaky_relu", "tanh", "hardtanh", "sigmoid", "softplus", "silu", "identity")
DOMAINS = ("all_reals", "nonnegative", "interval")

# Domain each activation is declared on unless overridden. The sigmoid family
# only has a finite condition constant on x >= 0.
_DEFAULT_DOMAIN = {
    "leaky_relu": "all_reals",
    "tanh": "all_reals",
    "hardtanh": "interval",
    "sigmoid": "nonnegative",
    "softplus": "nonnegative",
    "silu": "nonnegative",
    "identity": "all_reals",
}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class Activation:
    """Entrywise nonlinearity. ``param`` is the LeakyReLU slope or HardTanh bound."""

    kind: str
    param: float | None = None
    domain: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind in ("leaky_relu", "hardtanh"):
            default = 0.01 if self.kind == "leaky_relu" else 1.0
            p = default if self.param is None else float(self.param)
            if p <= 0:
                raise ValueError(f"{self.kind} parameter must be positive")
            object.__setattr__(self, "param", p)
        elif self.param is not None:
            raise ValueError(f"{self.kind} takes no parameter")
        dom = self.domain or _DEFAULT_DOMAIN[self.kind]
        if dom not in DOMAINS:
            raise ValueError(f"unknown domain {dom!r}")
        object.__setattr__(self, "domain", dom)

    @property
    def interval(self):
        """Closed interval of the declared domain (None for unbounded ends)."""
        if self.domain == "nonnegative":
            return (0.0, None)
        if self.domain == "interval":
            a = self.param if self.kind == "hardtanh" else 1.0
            return (-a, a)
        return (None, None)

    def __call__(self, x):
        k = self.kind
        if k == "leaky_relu":
            return np.where(x >= 0, x, self.param * x)
        if k == "tanh":
            return np.tanh(x)
        if k == "hardtanh":
            return np.clip(x, -self.param, self.param)
        if k == "sigmoid":
            return _sigmoid(x)
        if k == "softplus":
            return np.logaddexp(0.0, x)
        if k == "silu":
            return x * _sigmoid(x)
        return x.copy()

    def derivative(self, x):
        # Fixed Clarke selections at kinks: slope 1 for LeakyReLU at 0 and for
        # HardTanh at +-a.
        k = self.kind
        if k == "leaky_relu":
            return np.where(x >= 0, 1.0, self.param)
        if k == "tanh":
            return 1.0 - np.tanh(x) ** 2
        if k == "hardtanh":
            return (np.abs(x) <= self.param).astype(np.float64)
        if k == "sigmoid":
            s = _sigmoid(x)
            return s * (1.0 - s)
        if k == "softplus":
            return _sigmoid(x)
        if k == "silu":
            s = _sigmoid(x)
            return s + x * s * (1.0 - s)
        return np.ones_like(x)

    @property
    def tag(self):
        head = self.kind if self.param is None else f"{self.kind}({self.param!r})"
        if self.domain != _DEFAULT_DOMAIN[self.kind]:
            head += f"@{self.domain}"
        return head

    @classmethod
    def parse(cls, tag):
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([^)]*)\s*\))?\s*(?:@(\w+))?\s*", tag)
        if not m:
            raise ValueError(f"cannot parse activation tag {tag!r}")
        kind, param, domain = m.groups()
        kind = {"leakyrelu": "leaky_relu", "relu": "leaky_relu"}.get(kind.lower(), kind.lower())
        return cls(kind, float(param) if param else None, domain)


IDENTITY = Activation("identity")


@dataclass
class DenseLayer:
    W: np.ndarray
    bias: np.ndarray | None = None
    activation: Activation = IDENTITY

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise DimensionError("W must be 2-D")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64)
            if self.bias.shape != (self.W.shape[0],):
                raise DimensionError("bias length must equal the output width")

    kind = "dense"

    @property
    def out_features(self):
        return self.W.shape[0]

    @property
    def in_features(self):
        return self.W.shape[1]

    def weight(self):
        return self.W

    def linear(self, z):
        return z @ self.W.T

    def linear_transpose(self, d):
        return d @ self.W

    def num_params(self):
        return self.W.size + (0 if self.bias is None else self.bias.size)


@dataclass
class Network:
    layers: list
    num_classes: int

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_features != b.in_features:
                raise DimensionError(
                    f"layer {i} outputs {a.out_features} but layer {i + 1} expects {b.in_features}")
        if self.layers[-1].out_features != self.num_classes:
            raise DimensionError("final layer width must equal num_classes")

    @property
    def in_features(self):
        return self.layers[0].in_features

    @property
    def widths(self):
        return [self.in_features] + [layer.out_features for layer in self.layers]

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers)


@dataclass
class ForwardTrace:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray | None


def forward(net, x):
    """Return (logits, trace); the trace caches every layer input and pre-activation."""
    z = np.asarray(x, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != net.in_features:
        raise DimensionError(f"input shape {z.shape} does not match width {net.in_features}")
    trace = ForwardTrace()
    for layer in net.layers:
        trace.inputs.append(z)
        a = layer.linear(z)
        if layer.bias is not None:
            a = a + layer.bias
        trace.pre.append(a)
        z = layer.activation(a)
    return z, trace


def predict(net, x):
    return np.argmax(forward(net, x)[0], axis=1)


def cross_entropy(logits, labels):
    """Batch-mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError("one label per row expected")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - shifted[rows, labels]))
    p = np.exp(shifted - logz[:, None])
    p[rows, labels] -= 1.0
    return loss, p / n


def backward(net, trace, dlogits):
    """Reverse pass. Returns (per-layer LayerGrad list, gradient w.r.t. the input)."""
    if len(trace.pre) != len(net.layers):
        raise DimensionError("trace depth does not match the network")
    d = np.asarray(dlogits, dtype=np.float64)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if trace.pre[i].shape != d.shape:
            raise DimensionError(f"gradient shape {d.shape} mismatches layer {i}")
        dpre = d * layer.activation.derivative(trace.pre[i])
        gw = dpre.T @ trace.inputs[i]
        gb = dpre.sum(axis=0) if layer.bias is not None else None
        grads[i] = LayerGrad(gw, gb)
        d = layer.linear_transpose(dpre)
    return grads, d


def loss_and_grads(net, x, y):
    logits, trace = forward(net, x)
    loss, dlogits = cross_entropy(logits, y)
    grads, dx = backward(net, trace, dlogits)
    return loss, grads, dx
