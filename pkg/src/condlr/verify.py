"""Numerical checks of the low-rank geometry.

* ``tangent_project``: orthogonal projector onto the tangent space of the
  rank-r manifold at W = U S V^T.
* ``curvature_check``: how fast that projector turns as W moves, measured
  against the smallest singular value of W.
* ``theorem2_check``: integrates the projected flow Y' = P(Y) W'(t) along a
  constructed trajectory W(t) = exp(t O1) W0 exp(t O2)^T + t eta N, whose
  low-rank part stays in the singular-value band, and compares the tracking
  error with the linear bound 3 t eta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from . import linalg
from .errors import DimensionError

PADE_ORDER = 6


@dataclass
class TangentPoint:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        r = self.S.shape[0]
        if self.U.shape[1] != r or self.V.shape[1] != r or self.S.shape != (r, r):
            raise DimensionError("inconsistent factor shapes")

    @property
    def W(self):
        return self.U @ self.S @ self.V.T

    @classmethod
    def from_matrix(cls, W, r):
        dec = linalg.svd(W)
        return cls(dec.U[:, :r].copy(), np.diag(dec.sigma[:r]), dec.V[:, :r].copy())


def tangent_project(point, B):
    """U U^T B + B V V^T - U U^T B V V^T."""
    U, V = point.U, point.V
    if B.shape != (U.shape[0], V.shape[0]):
        raise DimensionError(f"B has shape {B.shape}, expected {(U.shape[0], V.shape[0])}")
    UtB = U.T @ B
    BV = B @ V
    return U @ UtB + BV @ V.T - U @ (UtB @ V) @ V.T


def random_orthonormal(rows, cols, rng):
    return linalg.thin_qr(rng.standard_normal((rows, cols))).Q


def random_skew(k, rng):
    a = rng.standard_normal((k, k))
    return (a - a.T) / 2.0


def _pade_coefficients(q):
    return [factorial(2 * q - k) * factorial(q) / (factorial(2 * q) * factorial(k) * factorial(q - k))
            for k in range(q + 1)]


def expm(A, order=PADE_ORDER):
    """Matrix exponential by scaling and squaring with a diagonal Pade approximant."""
    A = linalg.as_matrix(A)
    norm = np.linalg.norm(A, 1)
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = A / 2.0 ** squarings
    c = _pade_coefficients(order)
    eye = np.eye(A.shape[0])
    power = eye
    num = c[0] * eye
    den = c[0] * eye
    for k in range(1, order + 1):
        power = power @ X
        num = num + c[k] * power
        den = den + (-1) ** k * c[k] * power
    R = np.linalg.solve(den, num)
    for _ in range(squarings):
        R = R @ R
    return R


@dataclass(frozen=True)
class CurvatureRow:
    s_min: float
    rho_median: float
    rho_max: float

    @property
    def scaled(self):
        return self.rho_median * self.s_min


def curvature_check(n=12, m=10, r=4, s_min_list=(1.0, 0.1, 0.01), trials=20, seed=0,
                    rel_step=1e-6):
    """Projector sensitivity rho = ||P_W B - P_W' B|| / ||W - W'|| per smallest singular value.

    W has singular values evenly spaced from 1 down to ``s_min``; W' is the
    nearest rank-r matrix to W + delta N with delta = rel_step * s_min.
    """
    s_min_list = [float(s) for s in s_min_list]
    if any(s <= 0 for s in s_min_list) or s_min_list != sorted(s_min_list, reverse=True):
        raise ValueError("s_min_list must be positive and descending")
    if not 1 <= r <= min(n, m):
        raise ValueError("rank out of range")
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, m))
    B /= np.linalg.norm(B)
    rows = []
    for s_min in s_min_list:
        rhos = []
        for _ in range(trials):
            U, V = random_orthonormal(n, r, rng), random_orthonormal(m, r, rng)
            sigma = np.linspace(1.0, s_min, r) if r > 1 else np.array([s_min])
            point = TangentPoint(U, np.diag(sigma), V)
            N = rng.standard_normal((n, m))
            N /= np.linalg.norm(N)
            moved = TangentPoint.from_matrix(point.W + rel_step * s_min * N, r)
            dist = np.linalg.norm(point.W - moved.W)
            if dist == 0:
                raise ValueError("degenerate perturbation: W' equals W")
            diff = tangent_project(point, B) - tangent_project(moved, B)
            rhos.append(np.linalg.norm(diff) / dist)
        rows.append(CurvatureRow(s_min, float(np.median(rhos)), float(np.max(rhos))))
    return rows


def curvature_spread(rows):
    scaled = [row.scaled for row in rows]
    return max(scaled) / min(scaled)


@dataclass(frozen=True)
class TheoremCheckSpec:
    n: int = 12
    m: int = 10
    r: int = 3
    s: float = 1.0
    eps: float = 0.1
    eta: float = 1e-3
    mu: float = 1.0
    lam: float | None = None  # defaults to the largest admissible step
    substeps: int = 400
    seed: int = 0
    steps: int = 1
    atol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.eps < self.s:
            raise ValueError("need 0 < eps < s")
        if self.eta < 0 or self.mu <= self.eta:
            raise ValueError("need 0 <= eta < mu")
        if not 1 <= self.r <= min(self.n, self.m):
            raise ValueError("rank out of range")

    @property
    def lam_max(self):
        if self.eta == 0:
            return math.inf
        return (self.s - self.eps) / (4.0 * math.sqrt(2.0 * self.mu * self.eta))

    @property
    def horizon(self):
        if self.lam is not None:
            return self.lam
        return self.lam_max if self.eta > 0 else 1.0

    @property
    def gamma(self):
        return 32.0 * self.mu / (self.s - self.eps) ** 2


@dataclass
class TheoremCheckResult:
    times: np.ndarray
    errors: np.ndarray
    bounds: np.ndarray
    certified: bool
    passed: bool | None
    multistep_ratio: float | None = None
    notes: list = field(default_factory=list)

    @property
    def max_error(self):
        return float(self.errors.max())

    @property
    def bound(self):
        return float(self.bounds.max())


def _factor_field(U, S, V, F):
    # Factor form of Y' = P(Y) F for Y = U S V^T.
    FV = F @ V
    FtU = F.T @ U
    dS = U.T @ FV
    dU = np.linalg.solve(S.T, (FV - U @ dS).T).T
    dV = np.linalg.solve(S, (FtU - V @ dS.T).T).T
    return dU, dS, dV


class ConstructedTrajectory:
    """W(t) = exp(t O1) W0 exp(t O2)^T + t eta N with ||W'(t)||_F <= mu."""

    def __init__(self, spec, rng):
        n, m, r = spec.n, spec.m, spec.r
        self.U0 = random_orthonormal(n, r, rng)
        self.V0 = random_orthonormal(m, r, rng)
        sigma = np.sort(rng.uniform(spec.s - spec.eps, spec.s + spec.eps, r))[::-1]
        self.S0 = np.diag(sigma)
        self.W0 = self.U0 @ self.S0 @ self.V0.T
        O1, O2 = random_skew(n, rng), random_skew(m, rng)
        # ||O1 W + W O2^T||_F <= (||O1||_2 + ||O2||_2) ||W0||_F along the orbit.
        spread = (linalg.singular_values(O1)[0] + linalg.singular_values(O2)[0]) * np.linalg.norm(self.W0)
        scale = (spec.mu - spec.eta) / spread
        self.O1, self.O2 = O1 * scale, O2 * scale
        N = rng.standard_normal((n, m))
        self.N = N / np.linalg.norm(N)
        self.eta = spec.eta

    def low_rank(self, t):
        return expm(t * self.O1) @ self.W0 @ expm(t * self.O2).T

    def value(self, t):
        return self.low_rank(t) + t * self.eta * self.N

    def velocity(self, t):
        Wt = self.low_rank(t)
        return self.O1 @ Wt + Wt @ self.O2.T + self.eta * self.N


def integrate_projected_flow(traj, t_end, substeps, samples=None):
    """Classical RK4 on the factor system from Y(0) = W0; returns (times, Y list)."""
    U, S, V = traj.U0.copy(), traj.S0.copy(), traj.V0.copy()
    h = t_end / substeps
    times, ys = [0.0], [U @ S @ V.T]
    every = max(1, substeps // (samples or substeps))
    t = 0.0
    for k in range(substeps):
        F0, Fh, F1 = traj.velocity(t), traj.velocity(t + h / 2), traj.velocity(t + h)
        k1 = _factor_field(U, S, V, F0)
        k2 = _factor_field(U + h / 2 * k1[0], S + h / 2 * k1[1], V + h / 2 * k1[2], Fh)
        k3 = _factor_field(U + h / 2 * k2[0], S + h / 2 * k2[1], V + h / 2 * k2[2], Fh)
        k4 = _factor_field(U + h * k3[0], S + h * k3[1], V + h * k3[2], F1)
        U = U + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        S = S + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        V = V + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        t = (k + 1) * h
        if (k + 1) % every == 0 or k + 1 == substeps:
            times.append(t)
            ys.append(U @ S @ V.T)
    return np.array(times), ys


def theorem2_check(spec=TheoremCheckSpec(), samples=50):
    """Tracking error of the projected flow against 3 t eta on [0, lambda].

    A step above the admissible bound is run but not certified
    (``passed`` is None). With ``spec.steps`` > 1 the flow is continued over
    [0, steps * lambda] and the ratio of the final error to 3 lambda eta is
    reported without being asserted.
    """
    rng = np.random.default_rng(spec.seed)
    traj = ConstructedTrajectory(spec, rng)
    lam = spec.horizon
    certified = spec.eta == 0 or lam <= spec.lam_max * (1 + 1e-12)
    notes = [] if certified else [f"step {lam:g} exceeds the admissible bound {spec.lam_max:g}"]
    times, ys = integrate_projected_flow(traj, lam, spec.substeps, samples)
    errors = np.array([np.linalg.norm(y - traj.value(t)) for t, y in zip(times, ys)])
    bounds = 3.0 * times * spec.eta
    passed = bool(np.all(errors <= bounds + spec.atol)) if certified else None
    ratio = None
    if spec.steps > 1:
        t_end = spec.steps * lam
        t_all, y_all = integrate_projected_flow(traj, t_end, spec.substeps * spec.steps, samples)
        final = np.linalg.norm(y_all[-1] - traj.value(t_all[-1]))
        ratio = float(final / (3.0 * lam * spec.eta)) if spec.eta > 0 else float(final)
    return TheoremCheckResult(times, errors, bounds, certified, passed, ratio, notes)


def random_network(widths, activations, rng, bias=True):
    """Dense network with Gaussian weights (used by the gradient checks)."""
    from .nn import DenseLayer, Network

    layers = []
    for (m, n), act in zip(zip(widths, widths[1:]), activations):
        W = rng.standard_normal((n, m)) / np.sqrt(m)
        b = rng.standard_normal(n) * 0.1 if bias else None
        layers.append(DenseLayer(W, b, act))
    return Network(layers, widths[-1])


def _rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def finite_difference_check(seed, h=1e-5, widths=(5, 4, 3, 3), batch=6):
    """Max relative error of backward() against central differences.

    Returns (weight, bias, input) errors over a 3-layer smooth network.
    """
    from .nn import Activation, IDENTITY, cross_entropy, forward, loss_and_grads

    rng = np.random.default_rng(seed)
    acts = [Activation("tanh"), Activation("softplus"), IDENTITY][: len(widths) - 1]
    net = random_network(widths, acts, rng)
    X = rng.uniform(0, 1, (batch, widths[0]))
    y = rng.integers(0, widths[-1], batch)

    def loss():
        return cross_entropy(forward(net, X)[0], y)[0]

    _, grads, dx = loss_and_grads(net, X, y)

    def numeric(arr):
        out = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss()
            arr[idx] = keep - h
            down = loss()
            arr[idx] = keep
            out[idx] = (up - down) / (2 * h)
        return out

    ew = max(_rel_err(g.weight, numeric(layer.W)) for g, layer in zip(grads, net.layers))
    eb = max(_rel_err(g.bias, numeric(layer.bias)) for g, layer in zip(grads, net.layers))
    ex = _rel_err(dx, numeric(X))
    return ew, eb, ex


def factor_gradient_check(seed, h=1e-5, n=6, m=5, r=3):
    """Max relative error of factor_gradients against central differences of a smooth loss."""
    from .lowrank import factor_gradients, init_factorized

    rng = np.random.default_rng(seed)
    layer = init_factorized(n, m, r, rng=rng)
    A = rng.standard_normal((n, m))

    def loss():
        return float(np.sum(np.sin(layer.U @ layer.S @ layer.V.T) * A))

    G = np.cos(layer.weight()) * A
    analytic = factor_gradients(G, layer)
    errs = []
    for arr, grad in zip((layer.U, layer.S, layer.V), analytic):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss()
            arr[idx] = keep - h
            down = loss()
            arr[idx] = keep
            num[idx] = (up - down) / (2 * h)
        errs.append(_rel_err(grad, num))
    return max(errs)


def tangent_bridge_check(seed, n=9, m=7, r=3, tau=0.1):
    """|| U G3 V^T + G1 S V^T + U S G2^T - P_W(G) ||_F / ||P_W(G)||_F for a random G."""
    from .lowrank import factor_gradients, init_factorized, prepare_layer, riemannian_gradients, TrainVariant

    rng = np.random.default_rng(seed)
    layer = prepare_layer(init_factorized(n, m, r, rng=rng), TrainVariant("condlr", tau))
    G = rng.standard_normal((n, m))
    g1, g2, g3 = riemannian_gradients(*factor_gradients(G, layer), layer)
    U, S, V = layer.U, layer.S, layer.V
    assembled = U @ g3 @ V.T + g1 @ S @ V.T + U @ S @ g2.T
    ref = tangent_project(TangentPoint(U, S, V), G)
    return float(np.linalg.norm(assembled - ref) / np.linalg.norm(ref))
