"""Factorized layers W = U S V^T and their training steps.

A CondLR layer keeps U (n x r) and V (m x r) with orthonormal columns and an
invertible r x r core S whose singular values lie in the band [s - eps, s + eps],
where s is the root-mean-square singular value of S and eps = tau s / (2 + tau).
That band bounds cond2(W) = cond2(S) by 1 + tau.

One training step (``condlr_step``):

1. factor gradients G V S^T, U^T G V, G^T U S and the projected flow fields
   G1 = (I - UU^T) dU (SS^T)^-1, G2 = (I - VV^T) dV (S^T S)^-1, G3 = dS,
   all at the entry values of (U, S, V);
2. a momentum-SGD step on each factor;
3. thin-QR retraction of U and V onto the Stiefel manifold;
4. projection of S onto the singular-value band.

The ``unit`` variant fixes s = 1 with zero tolerance, ``noband`` skips step 4,
and ``vanilla_uv``/``full``/``projected_sgd`` are the non-CondLR baselines
handled by ``baseline_step``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import linalg
from .errors import DimensionError, InfeasibleRankError, RankDeficientError, SingularFactorError
from .nn import IDENTITY, Activation, DenseLayer

LOWRANK_VARIANTS = ("condlr", "unit", "noband")
BASELINE_VARIANTS = ("vanilla_uv", "full", "projected_sgd")
VARIANTS = LOWRANK_VARIANTS + BASELINE_VARIANTS
RIDGE = 1e-10


@dataclass(frozen=True)
class TrainVariant:
    tag: str
    tau: float = 0.1

    def __post_init__(self):
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown variant {self.tag!r}; choose from {VARIANTS}")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.tag == "unit":
            object.__setattr__(self, "tau", 0.0)

    @property
    def factorized(self):
        return self.tag in LOWRANK_VARIANTS

    @property
    def label(self):
        return f"condlr(tau={self.tau:g})" if self.tag == "condlr" else self.tag

    @classmethod
    def parse(cls, text, tau=0.1):
        text = text.strip()
        if text.startswith("condlr(") and text.endswith(")"):
            return cls("condlr", float(text[7:-1].split("=")[-1]))
        return cls(text, tau)


def band_halfwidth(s, tau):
    return tau * s / (2.0 + tau)


def compression(n, m, r):
    """Fraction of dense parameters removed by a rank-r factorization."""
    return 1.0 - r * (n + m + r) / (n * m)


def select_rank(n, m, alpha, name="layer"):
    """Largest r >= 1 with r (n + m + r) <= (1 - alpha) n m, compared exactly."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    budget = (1 - Fraction(repr(float(alpha)))) * n * m
    if n + m + 1 > budget:
        raise InfeasibleRankError(
            f"{name} ({n}x{m}): rank 1 needs {n + m + 1} parameters but the budget at "
            f"alpha={alpha} is {float(budget):g}; the layer is too small to compress")
    r = 1
    while r < min(n, m) and (r + 1) * (n + m + r + 1) <= budget:
        r += 1
    return r


@dataclass
class FactorizedLayer:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    bias: np.ndarray | None = None
    activation: Activation = IDENTITY
    tau: float | None = 0.1
    s_band: float = 1.0
    eps_band: float = 0.0
    ridge_hits: int = 0

    kind = "factorized"

    def __post_init__(self):
        self.U = np.array(self.U, dtype=np.float64)
        self.S = np.array(self.S, dtype=np.float64)
        self.V = np.array(self.V, dtype=np.float64)
        r = self.S.shape[0]
        if self.S.shape != (r, r) or self.U.shape[1] != r or self.V.shape[1] != r:
            raise DimensionError(
                f"inconsistent factor shapes U{self.U.shape} S{self.S.shape} V{self.V.shape}")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64)

    @property
    def rank(self):
        return self.S.shape[0]

    @property
    def out_features(self):
        return self.U.shape[0]

    @property
    def in_features(self):
        return self.V.shape[0]

    def weight(self):
        return self.U @ self.S @ self.V.T

    def linear(self, z):
        return ((z @ self.V) @ self.S.T) @ self.U.T

    def linear_transpose(self, d):
        return ((d @ self.U) @ self.S) @ self.V.T

    def num_params(self):
        n, m, r = self.out_features, self.in_features, self.rank
        return r * (n + m + r) + (0 if self.bias is None else self.bias.size)

    def singular_values(self):
        return linalg.singular_values(self.S)

    def orthonormality_residuals(self):
        r = self.rank
        return (linalg.frob(self.U.T @ self.U - np.eye(r)),
                linalg.frob(self.V.T @ self.V - np.eye(r)))


@dataclass
class UVLayer:
    """Unconstrained two-factor layer W = U V^T (the vanilla low-rank baseline)."""

    U: np.ndarray
    V: np.ndarray
    bias: np.ndarray | None = None
    activation: Activation = IDENTITY

    kind = "uv"

    def __post_init__(self):
        self.U = np.array(self.U, dtype=np.float64)
        self.V = np.array(self.V, dtype=np.float64)
        if self.U.shape[1] != self.V.shape[1]:
            raise DimensionError("U and V must have the same number of columns")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64)

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def out_features(self):
        return self.U.shape[0]

    @property
    def in_features(self):
        return self.V.shape[0]

    def weight(self):
        return self.U @ self.V.T

    def linear(self, z):
        return (z @ self.V) @ self.U.T

    def linear_transpose(self, d):
        return (d @ self.U) @ self.V.T

    def num_params(self):
        return self.rank * (self.out_features + self.in_features) + (
            0 if self.bias is None else self.bias.size)


def gaussian_weight(n, m, rng):
    """n x m Gaussian matrix with He scaling sqrt(2 / fan_in), fan_in = m."""
    return rng.standard_normal((n, m)) * np.sqrt(2.0 / m)


def init_factorized(n, m, r, scheme="svd_of_gaussian", rng=None, activation=IDENTITY,
                    bias=True, tau=0.1, W0=None):
    """Rank-r factors of a Gaussian matrix.

    ``svd_of_gaussian`` keeps the truncated SVD; ``exp_decay`` keeps its
    singular vectors but sets the core spectrum to 1, 1/2, 1/4, ...
    The band is not enforced here; see ``prepare_layer``.
    """
    if not 1 <= r <= min(n, m):
        raise ValueError(f"rank {r} out of range for a {n}x{m} layer")
    if scheme not in ("svd_of_gaussian", "exp_decay"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(rng)
    if W0 is None:
        W0 = gaussian_weight(n, m, rng)
    dec = linalg.svd(W0)
    sigma = dec.sigma[:r] if scheme == "svd_of_gaussian" else 2.0 ** -np.arange(r)
    b = np.zeros(n) if bias else None
    s = float(np.sqrt(np.mean(sigma ** 2)))
    return FactorizedLayer(dec.U[:, :r].copy(), np.diag(sigma), dec.V[:, :r].copy(), b,
                           activation, tau, s, band_halfwidth(s, tau or 0.0))


def sigma_band_project(S, tau):
    """Nearest matrix to S with singular values in [s - eps, s + eps].

    Returns (S', s, eps) with s the root-mean-square singular value of S and
    eps = tau s / (2 + tau), so cond2(S') <= 1 + tau.
    """
    dec = linalg.svd(S)
    s = float(np.sqrt(np.mean(dec.sigma ** 2)))
    if s == 0.0:
        raise SingularFactorError("cannot band-project the zero matrix")
    eps = band_halfwidth(s, tau)
    clamped = np.clip(dec.sigma, s - eps, s + eps)
    return (dec.U * clamped) @ dec.V.T, s, eps


def stiefel_scale_project(S, s=None):
    """s * Q with Q the orthonormal QR factor of S.

    ``s`` defaults to sqrt(trace(S^T S) / r); pass s=1 for the unit variant.
    """
    S = linalg.as_matrix(S, "S")
    if s is None:
        s = float(np.sqrt(np.trace(S.T @ S) / S.shape[0]))
    q = linalg.thin_qr(S).Q
    return s * q


def factor_gradients(G, layer):
    """Chain rule from dL/dW to the factors of W = U S V^T."""
    U, S, V = layer.U, layer.S, layer.V
    if G.shape != (U.shape[0], V.shape[0]):
        raise DimensionError(f"gradient shape {G.shape} does not match layer "
                             f"{(U.shape[0], V.shape[0])}")
    GV = G @ V
    return GV @ S.T, U.T @ GV, G.T @ (U @ S)


def _core_qr(S):
    try:
        return linalg.thin_qr(S).R
    except RankDeficientError as exc:
        raise SingularFactorError(
            "core factor S is numerically singular; project it onto the singular-value "
            "band (condlr) before computing projected gradients") from exc


def riemannian_gradients(grad_u, grad_s, grad_v, layer, ridge=0.0):
    """Projected flow fields (G1, G2, G3) for the U, V and S factors.

    With tau == 0 the core is s times an orthogonal matrix and both Gram
    inverses reduce to 1 / s^2. ``ridge`` > 0 regularizes the Gram solves
    instead of failing on a near-singular S.
    """
    U, S, V = layer.U, layer.S, layer.V
    pu = grad_u - U @ (U.T @ grad_u)
    pv = grad_v - V @ (V.T @ grad_v)
    if layer.tau == 0:
        inv = 1.0 / layer.s_band ** 2
        return pu * inv, pv * inv, grad_s
    if ridge > 0:
        eye = np.eye(S.shape[0])
        g1 = np.linalg.solve(S @ S.T + ridge * eye, pu.T).T
        g2 = np.linalg.solve(S.T @ S + ridge * eye, pv.T).T
        return g1, g2, grad_s
    # S S^T = R1^T R1 with S^T = Q1 R1, and S^T S = R2^T R2 with S = Q2 R2.
    r1 = _core_qr(S.T)
    r2 = _core_qr(S)
    g1 = linalg.solve_triangular(r1, linalg.solve_triangular(r1, pu.T, trans=True)).T
    g2 = linalg.solve_triangular(r2, linalg.solve_triangular(r2, pv.T, trans=True)).T
    return g1, g2, grad_s


@dataclass
class OptState:
    """Heavy-ball momentum buffers: buf <- momentum * buf + grad; x <- x - lr * buf."""

    lr: float
    momentum: float = 0.0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def update(self, key, grad):
        buf = self.buffers.get(key)
        if buf is None:
            buf = grad.copy()
        else:
            if buf.shape != grad.shape:
                raise DimensionError(f"momentum buffer {key!r} has shape {buf.shape}")
            buf = self.momentum * buf + grad
        self.buffers[key] = buf
        return self.lr * buf


def _step_bias(layer, grad_bias, opt):
    if layer.bias is not None and grad_bias is not None:
        layer.bias = layer.bias - opt.update("b", grad_bias)


def prepare_layer(layer, variant):
    """Make a freshly initialized low-rank layer satisfy its variant's invariants."""
    if variant.tag == "condlr":
        layer.tau = variant.tau
        layer.S, layer.s_band, layer.eps_band = sigma_band_project(layer.S, variant.tau)
    elif variant.tag == "unit":
        layer.tau, layer.s_band, layer.eps_band = 0.0, 1.0, 0.0
        layer.S = stiefel_scale_project(layer.S, 1.0)
    elif variant.tag == "noband":
        layer.tau = None
        layer.s_band = float(np.sqrt(np.sum(layer.S ** 2) / layer.rank))
        layer.eps_band = float("inf")
    return layer


def condlr_step(layer, G, opt, variant, grad_bias=None):
    """One iteration of the low-rank scheme on ``layer`` given dL/dW = G (in place)."""
    if not variant.factorized:
        raise ValueError(f"{variant.tag} is not a factorized variant; use baseline_step")
    gu, gs, gv = factor_gradients(G, layer)
    ridge = 0.0
    if variant.tag == "noband":
        try:
            _core_qr(layer.S)
        except SingularFactorError:
            layer.ridge_hits += 1
            ridge = RIDGE * layer.s_band ** 2
    g1, g2, g3 = riemannian_gradients(gu, gs, gv, layer, ridge=ridge)

    U = layer.U - opt.update("U", g1)
    V = layer.V - opt.update("V", g2)
    S = layer.S - opt.update("S", g3)
    layer.U = linalg.thin_qr(U).Q
    layer.V = linalg.thin_qr(V).Q
    if variant.tag == "condlr":
        layer.S, layer.s_band, layer.eps_band = sigma_band_project(S, variant.tau)
    elif variant.tag == "unit":
        layer.S = stiefel_scale_project(S, 1.0)
    else:
        layer.S = S
        layer.s_band = float(np.sqrt(np.sum(S ** 2) / layer.rank))
    _step_bias(layer, grad_bias, opt)
    return layer


def orthonormalize(W):
    """Q factor of the tall orientation of W, so that cond2(W) = 1."""
    if W.shape[0] >= W.shape[1]:
        return linalg.thin_qr(W).Q
    return linalg.thin_qr(W.T).Q.T


def baseline_step(layer, G, opt, variant, grad_bias=None):
    """Dense SGD, projected SGD, or alternating U/V descent (in place)."""
    tag = variant.tag
    if tag in ("full", "projected_sgd"):
        if not isinstance(layer, DenseLayer):
            raise DimensionError(f"{tag} needs a dense layer")
        if G.shape != layer.W.shape:
            raise DimensionError(f"gradient shape {G.shape} does not match W {layer.W.shape}")
        W = layer.W - opt.update("W", G)
        layer.W = orthonormalize(W) if tag == "projected_sgd" else W
    elif tag == "vanilla_uv":
        if not isinstance(layer, UVLayer):
            raise DimensionError("vanilla_uv needs a UVLayer")
        if G.shape != (layer.out_features, layer.in_features):
            raise DimensionError(f"gradient shape {G.shape} does not match the layer")
        layer.U = layer.U - opt.update("U", G @ layer.V)
        layer.V = layer.V - opt.update("V", G.T @ layer.U)
    else:
        raise ValueError(f"{tag} is not a baseline variant; use condlr_step")
    _step_bias(layer, grad_bias, opt)
    return layer


def step(layer, G, opt, variant, grad_bias=None):
    if variant.factorized:
        return condlr_step(layer, G, opt, variant, grad_bias)
    return baseline_step(layer, G, opt, variant, grad_bias)


def build_layer(variant, n, m, rank=None, scheme="svd_of_gaussian", rng=None,
                activation=IDENTITY, bias=True):
    """Initialized layer of the storage type the variant trains."""
    rng = np.random.default_rng(rng)
    W0 = gaussian_weight(n, m, rng)
    if variant.tag in ("full", "projected_sgd"):
        W = W0 if variant.tag == "full" else orthonormalize(W0)
        return DenseLayer(W, np.zeros(n) if bias else None, activation)
    f = init_factorized(n, m, rank, scheme, rng, activation, bias, variant.tau, W0=W0)
    if variant.tag == "vanilla_uv":
        root = np.sqrt(np.diag(f.S))
        return UVLayer(f.U * root, f.V * root, f.bias, activation)
    return prepare_layer(f, variant)
