"""Condition-number theory for feed-forward networks as executable checks.

For a scalar activation the relative condition constant on a domain D is

    C(sigma, D) = sup_{x in D} |nu_x| |x| / |sigma(x)|,

with nu_x a generalized (Clarke) derivative. A network with layers W_i and
activations sigma_i then has cond(f) <= prod_i C_i * prod_i cond2(W_i)
whenever every layer is an injective map and each activation acts on
scalars; the general vector case can exceed this product and is only
reported, never asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .nn import IDENTITY, Activation, Network, DenseLayer, forward
from .robustness import cond_report

WINDOW_HALF_WIDTH = 50.0
DEFAULT_GRID = 200_001
KINK_OFFSET = 1e-9


class UnboundedConstantError(ValueError):
    """The activation's condition constant is infinite on the requested domain."""


@dataclass(frozen=True)
class CondConstant:
    activation: Activation
    domain: str
    value: float
    tight: bool = True


@dataclass(frozen=True)
class EmpiricalConstant:
    value: float
    location: float
    window: tuple

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class EmpiricalCondEstimate:
    x: np.ndarray
    epsilon: float
    num_dirs: int
    estimate: float


def _resolve(act, domain):
    if isinstance(act, str):
        act = Activation.parse(act)
    if domain is not None and domain != act.domain:
        act = Activation(act.kind, act.param, domain)
    return act


def activation_cond_closed_form(act, domain=None):
    """Closed-form condition constant of ``act`` on its declared domain.

    ``tight`` is False when the value is a valid but loose upper bound on the
    supremum (LeakyReLU with slope above one, the sigmoid, SiLU and HardTanh
    with a > 1); two-sided comparisons against sampling only apply when
    ``tight`` holds.
    """
    act = _resolve(act, domain)
    k, dom = act.kind, act.domain
    if k in ("sigmoid", "softplus", "silu") and dom == "all_reals":
        raise UnboundedConstantError(
            f"{k} has an unbounded condition constant on the negative axis; "
            "declare it on the nonnegative domain")
    if k == "leaky_relu":
        return CondConstant(act, dom, max(act.param, 1.0), act.param <= 1.0)
    if k == "hardtanh":
        return CondConstant(act, dom, max(act.param, 1.0), act.param <= 1.0)
    if k == "sigmoid":
        return CondConstant(act, dom, 1.0 / math.e, False)
    if k == "silu":
        return CondConstant(act, dom, 1.0 + 1.0 / math.e, False)
    # tanh, softplus, identity
    return CondConstant(act, dom, 1.0, True)


def sampling_window(act, half_width=WINDOW_HALF_WIDTH):
    lo, hi = act.interval
    return (-half_width if lo is None else lo, half_width if hi is None else hi)


def _kinks(act):
    if act.kind == "leaky_relu":
        return (0.0,)
    if act.kind == "hardtanh":
        return (-act.param, act.param)
    return ()


def pointwise_ratio(act, x):
    """|sigma'(x)| |x| / |sigma(x)| with +inf where only the denominator vanishes."""
    x = np.asarray(x, dtype=np.float64)
    num = np.abs(act.derivative(x)) * np.abs(x)
    den = np.abs(act(x))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return np.where((den == 0) & (num == 0), 0.0, out)


def activation_cond_empirical(act, domain=None, grid_size=DEFAULT_GRID,
                              half_width=WINDOW_HALF_WIDTH):
    """Sup of the pointwise ratio over a uniform grid of the sampling window.

    x = 0 is replaced by points just off zero (the ratio extends by
    continuity), and each kink is probed from both sides so both one-sided
    derivatives enter the supremum.
    """
    if grid_size < 1000:
        raise ValueError("grid_size must be at least 1000")
    act = _resolve(act, domain)
    lo, hi = sampling_window(act, half_width)
    grid = np.linspace(lo, hi, grid_size)
    probes = [0.0] + list(_kinks(act))
    extra = []
    for k in probes:
        d = KINK_OFFSET * max(1.0, abs(k))
        extra += [k - d, k + d]
    grid = np.concatenate([grid[grid != 0.0], [e for e in extra if lo <= e <= hi]])
    ratio = pointwise_ratio(act, grid)
    i = int(np.argmax(ratio))
    return EmpiricalConstant(float(ratio[i]), float(grid[i]), (lo, hi))


def network_cond_bound(net):
    """prod_i C(sigma_i) * prod_i cond2(W_i), accumulated in log space."""
    log_c = math.fsum(math.log(activation_cond_closed_form(layer.activation).value)
                      for layer in net.layers)
    return math.exp(log_c + cond_report(net).log_product)


def relative_error_ratio(f, x, delta):
    fx = np.asarray(f(x), dtype=np.float64)
    num = np.linalg.norm(np.asarray(f(x + delta)) - fx) / np.linalg.norm(fx)
    return float(num / (np.linalg.norm(delta) / np.linalg.norm(x)))


def empirical_cond_at(f, x, epsilon=1e-4, num_dirs=100, seed=0):
    """Max relative error ratio over random perturbations of relative size ``epsilon``.

    Sampling only sees finitely many directions, so this is a lower bound on
    the local condition number cond(f; x).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("the local condition number is undefined at x = 0")
    if np.linalg.norm(np.asarray(f(x))) == 0:
        raise ValueError("f(x) = 0: the relative error is undefined")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(num_dirs):
        u = rng.standard_normal(x.size)
        u /= np.linalg.norm(u)
        best = max(best, relative_error_ratio(f, x, epsilon * nx * u))
    return EmpiricalCondEstimate(x, epsilon, num_dirs, best)


def net_function(net):
    """Map a single input vector to the network's output vector."""
    return lambda v: forward(net, np.asarray(v, dtype=np.float64).reshape(1, -1))[0][0]


def jacobian(net, x):
    """Exact Jacobian of the network output at a single input (outputs x inputs)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, trace = forward(net, x)
    rows = []
    for j in range(net.layers[-1].out_features):
        d = np.zeros((1, net.layers[-1].out_features))
        d[0, j] = 1.0
        for i in range(len(net.layers) - 1, -1, -1):
            layer = net.layers[i]
            d = layer.linear_transpose(d * layer.activation.derivative(trace.pre[i]))
        rows.append(d[0])
    return np.array(rows)


def jacobian_cond_at(net, x):
    """cond(f; x) = ||J(x)||_2 ||x|| / ||f(x)|| for a differentiable point x."""
    x = np.asarray(x, dtype=np.float64).ravel()
    fx = net_function(net)(x)
    norm_j = linalg.singular_values(jacobian(net, x))[0]
    return float(norm_j * np.linalg.norm(x) / np.linalg.norm(fx))


def bound_applies(net):
    """True when the layerwise product provably bounds cond(f; x) everywhere.

    That holds for square invertible linear layers with identity activations,
    and for width-one chains where every activation acts on a scalar, in
    both cases without biases (a bias makes cond(f; x) unbounded near the
    zero of f).
    """
    if any(layer.bias is not None and np.any(layer.bias) for layer in net.layers):
        return False
    widths = net.widths
    if all(w == 1 for w in widths):
        return True
    return (all(layer.activation.kind == "identity" for layer in net.layers)
            and len(set(widths)) == 1)


def compose(outer, inner):
    """Stack two networks: ``outer`` applied after ``inner``."""
    return Network(list(inner.layers) + list(outer.layers), outer.num_classes)


def single_layer(W, activation=IDENTITY, bias=None):
    W = np.asarray(W, dtype=np.float64)
    return Network([DenseLayer(W, bias, activation)], W.shape[0])
