"""FGSM attacks, robust accuracy and per-layer condition-number tracking."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import NumericalError
from .nn import cross_entropy, backward, forward

DEFAULT_EPSILONS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06)
EVAL_CHUNK = 1000


@dataclass(frozen=True)
class AttackSpec:
    epsilons: tuple = DEFAULT_EPSILONS
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if any(e < 0 for e in eps):
            raise ValueError("attack budgets must be nonnegative")
        if list(eps) != sorted(eps):
            raise ValueError("attack budgets must be sorted ascending")
        object.__setattr__(self, "epsilons", eps)


@dataclass(frozen=True)
class RobustnessReport:
    epsilons: tuple
    accuracy: tuple
    num_samples: int

    def at(self, eps):
        return self.accuracy[self.epsilons.index(float(eps))]

    def as_dict(self):
        return {f"{e:g}": a for e, a in zip(self.epsilons, self.accuracy)}


def input_gradient(net, X, y):
    """Gradient of the batch-mean cross-entropy with respect to the inputs."""
    logits, trace = forward(net, X)
    _, dlogits = cross_entropy(logits, y)
    return backward(net, trace, dlogits)[1]


def fgsm(net, X, y, eps, clamp=(0.0, 1.0), grad=None):
    """One signed-gradient step of size ``eps`` in the max norm, clamped to the box.

    ``sign(0) = 0``, so coordinates with a vanishing gradient are left alone.
    A precomputed input gradient may be passed to attack several budgets.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    if eps == 0:
        return X.copy()
    if grad is None:
        grad = input_gradient(net, X, y)
    Xa = np.clip(X + eps * np.sign(grad), clamp[0], clamp[1])
    # Rounding in x + eps can overshoot by half an ulp; step back towards x
    # until the measured perturbation is within eps.
    over = np.abs(Xa - X) > eps
    while over.any():
        Xa[over] = np.nextafter(Xa[over], X[over])
        over = np.abs(Xa - X) > eps
    return Xa


def robust_accuracy(net, dataset, spec=AttackSpec(), chunk=EVAL_CHUNK):
    """Accuracy under FGSM at each budget of ``spec``.

    The attack gradient is the batch-mean loss gradient over chunks of
    ``chunk`` samples; its sign does not depend on the 1/batch factor, so the
    result is independent of the chunking.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("robust accuracy of an empty dataset is undefined")
    correct = np.zeros(len(spec.epsilons), dtype=np.int64)
    for lo in range(0, n, chunk):
        X = dataset.features[lo: lo + chunk]
        y = dataset.labels[lo: lo + chunk]
        grad = input_gradient(net, X, y) if any(e > 0 for e in spec.epsilons) else None
        for k, eps in enumerate(spec.epsilons):
            Xa = fgsm(net, X, y, eps, (spec.clamp_lo, spec.clamp_hi), grad)
            correct[k] += int(np.sum(np.argmax(forward(net, Xa)[0], axis=1) == y))
    acc = tuple(float(c) / n for c in correct)
    if any(b > a for a, b in zip(acc, acc[1:])):
        warnings.warn("robust accuracy increased with the attack budget", RuntimeWarning)
    return RobustnessReport(spec.epsilons, acc, n)


def clean_accuracy(net, dataset):
    return float(np.mean(np.argmax(forward(net, dataset.features)[0], axis=1) == dataset.labels))


def layer_singular_values(layer):
    """Nonzero spectrum of a layer's weight.

    Factorized layers use S; a U V^T layer uses the small product R_U R_V^T
    of its triangular QR factors; dense layers take a full SVD.
    """
    kind = getattr(layer, "kind", "dense")
    if kind == "factorized":
        return linalg.singular_values(layer.S)
    if kind == "uv":
        ru = linalg.thin_qr(layer.U, check_rank=False).R
        rv = linalg.thin_qr(layer.V, check_rank=False).R
        return linalg.singular_values(ru @ rv.T)
    return linalg.singular_values(layer.weight())


def layer_cond(layer):
    sigma = layer_singular_values(layer)
    if sigma[0] == 0.0:
        raise NumericalError("condition number of a zero weight matrix is undefined")
    keep = sigma > linalg.RANK_TOL * sigma[0]
    return float(sigma[0] / sigma[keep][-1])


@dataclass(frozen=True)
class CondReport:
    per_layer: tuple
    log_product: float

    @property
    def product(self):
        return math.exp(self.log_product)


def cond_report(net):
    conds = tuple(layer_cond(layer) for layer in net.layers)
    return CondReport(conds, math.fsum(math.log(c) for c in conds))


@dataclass
class CondTrace:
    """Per-epoch record of layer condition numbers and the activation-constant product."""

    activation_product: float = 1.0
    epochs: list = field(default_factory=list)
    per_layer: list = field(default_factory=list)
    log_products: list = field(default_factory=list)

    def record(self, epoch, report):
        if any(c < 1.0 for c in report.per_layer):
            raise NumericalError("a condition number below 1 indicates a broken spectrum")
        self.epochs.append(epoch)
        self.per_layer.append(report.per_layer)
        self.log_products.append(report.log_product)

    @property
    def products(self):
        return [math.exp(v) for v in self.log_products]
