"""Dense double-precision kernel: products, thin QR, SVD and condition numbers.

Matrices are plain 2-D float64 numpy arrays. The QR is Householder based
with the sign convention diag(R) >= 0, which makes the thin factorization of
a full-column-rank matrix unique. The SVD is a one-sided (Hestenes) Jacobi
iteration run on the triangular factor of a thin QR; column pairs are
rotated in round-robin rounds of disjoint pairs so each round is a handful
of vectorized array operations.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

from .errors import ConvergenceError, DimensionError, NumericalError, RankDeficientError

EPS = np.finfo(np.float64).eps
RANK_TOL = 1e-12
MAX_SWEEPS = 60


class ThinQR(NamedTuple):
    Q: np.ndarray
    R: np.ndarray


class SvdResult(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


class Cond2(NamedTuple):
    value: float
    rank_deficient: bool


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or 0 in m.shape:
        raise DimensionError(f"{name} must be a nonempty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} has non-finite entries")
    return m


def matmul(a, b):
    a, b = as_matrix(a, "A"), as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _householder(a):
    """In-place Householder triangularization of a tall copy.

    Returns the reflector vectors (unit 2-norm, zero above the diagonal) and
    the k x k upper-triangular factor before the sign fix.
    """
    m, k = a.shape
    vs = np.zeros((m, k))
    for j in range(k):
        x = a[j:, j]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += np.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= np.linalg.norm(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        vs[j:, j] = v
    return vs, np.triu(a[:k, :])


def _form_q(vs, k):
    m = vs.shape[0]
    q = np.zeros((m, k))
    q[:k, :k] = np.eye(k)
    for j in range(k - 1, -1, -1):
        v = vs[j:, j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q


def _is_orthonormal(a):
    k = a.shape[1]
    return np.linalg.norm(a.T @ a - np.eye(k)) <= 8 * EPS * k


def _qr_unchecked(a):
    vs, r = _householder(a.copy())
    q = _form_q(vs, a.shape[1])
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def thin_qr(a, check_rank=True):
    """Thin QR with nonnegative diag(R) of a tall matrix.

    A matrix whose columns are already orthonormal to rounding is its own Q
    factor (R = I), which makes the map idempotent.
    """
    a = as_matrix(a)
    m, k = a.shape
    if m < k:
        raise DimensionError(f"thin_qr needs rows >= cols, got {a.shape}")
    if _is_orthonormal(a):
        return ThinQR(a.copy(), np.eye(k))
    q, r = _qr_unchecked(a)
    if check_rank:
        scale = np.linalg.norm(a)
        diag = np.abs(np.diag(r))
        bad = np.flatnonzero(diag <= RANK_TOL * scale)
        if bad.size:
            raise RankDeficientError(
                f"matrix is numerically rank deficient at column {bad[0]}", column=int(bad[0]))
    return ThinQR(q, r)


def _tournament(n):
    """Row layouts for a circle-method round robin on an even number of players.

    In each layout row i of the top half meets row i of the bottom half;
    consecutive layouts differ by one fixed rotation and the cycle closes
    after n - 1 rounds.
    """
    players = list(range(n))
    layouts = []
    for _ in range(n - 1):
        h = n // 2
        layouts.append(np.array(players[:h] + players[h:][::-1]))
        players = [players[0], players[-1]] + players[1:-1]
    steps = []
    for t, lay in enumerate(layouts):
        nxt = layouts[(t + 1) % len(layouts)]
        pos = np.empty(n, dtype=np.intp)
        pos[lay] = np.arange(n)
        steps.append(pos[nxt])
    return layouts[0], steps


_TOURNAMENTS: dict[int, tuple] = {}


def _jacobi_rounds(a, max_sweeps=MAX_SWEEPS):
    """Vectorized round-robin Jacobi; the fallback when numba is unavailable."""
    m, k = a.shape
    if k == 1:
        return a.copy(), np.eye(1)
    n = k + (k % 2)
    if n not in _TOURNAMENTS:
        _TOURNAMENTS[n] = _tournament(n)
    layout, steps = _TOURNAMENTS[n]
    h = n // 2
    # Work on transposes so each column is a contiguous row.
    at = np.zeros((n, m))
    at[:k] = a.T
    vt = np.eye(n)
    at, vt = at[layout], vt[layout]
    tol = EPS * k
    floor = float(np.sum(at * at)) * tol * tol / (k * k)
    for _ in range(max_sweeps):
        rotated = False
        for step in steps:
            top, bot = at[:h], at[h:]
            alpha = np.einsum("ij,ij->i", top, top)
            beta = np.einsum("ij,ij->i", bot, bot)
            gamma = np.einsum("ij,ij->i", top, bot)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if active.any():
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(active, t, 0.0)[:, None]
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                at = np.concatenate([c * top - s * bot, s * top + c * bot])
                vtop, vbot = vt[:h], vt[h:]
                vt = np.concatenate([c * vtop - s * vbot, s * vtop + c * vbot])
            at, vt = at[step], vt[step]
        if not rotated:
            inv = np.empty(n, dtype=np.intp)
            inv[layout] = np.arange(n)
            at, vt = at[inv], vt[inv]
            return at[:k].T.copy(), vt[:k, :k].T.copy()
    gram = at @ at.T
    off = np.linalg.norm(gram - np.diag(np.diag(gram))) / max(np.linalg.norm(gram), 1e-300)
    raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps "
                           f"(relative off-diagonal residual {off:.3e})", residual=off)


def _cyclic_kernel(at, vt, tol, max_sweeps):
    # Row-cyclic one-sided Jacobi on the rows of ``at`` (the columns of A).
    n, m = at.shape
    # columns below this squared norm are rounding noise of a rank deficiency
    floor = 0.0
    for p in range(n):
        for i in range(m):
            floor += at[p, i] * at[p, i]
    floor *= (tol * tol) / (n * n)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += at[p, i] * at[p, i]
                    beta += at[q, i] * at[q, i]
                    gamma += at[p, i] * at[q, i]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or min(alpha, beta) <= floor:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    at[p, i] = c * x - s * y
                    at[q, i] = s * x + c * y
                for i in range(n):
                    x = vt[p, i]
                    y = vt[q, i]
                    vt[p, i] = c * x - s * y
                    vt[q, i] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


if numba is not None:
    _cyclic_kernel = numba.njit(cache=True)(_cyclic_kernel)


def _jacobi_columns(a, max_sweeps=MAX_SWEEPS):
    """Orthogonalize the columns of square ``a`` by plane rotations.

    Returns (A J, J) with mutually orthogonal columns in A J.
    """
    if numba is None:
        return _jacobi_rounds(a, max_sweeps)
    k = a.shape[1]
    at = np.ascontiguousarray(a.T)
    vt = np.eye(k)
    if _cyclic_kernel(at, vt, EPS * k, max_sweeps) < 0:
        gram = at @ at.T
        off = np.linalg.norm(gram - np.diag(np.diag(gram))) / max(np.linalg.norm(gram), 1e-300)
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps "
                               f"(relative off-diagonal residual {off:.3e})", residual=off)
    return at.T.copy(), vt.T.copy()


def _complete(u, filled):
    """Replace the columns of ``u`` not in ``filled`` by an orthonormal completion."""
    m, k = u.shape
    basis = u[:, filled]
    missing = np.flatnonzero(~filled)
    for j in missing:
        for e in range(m):
            x = np.zeros(m)
            x[e] = 1.0
            for _ in range(2):
                x -= basis @ (basis.T @ x)
            nrm = np.linalg.norm(x)
            if nrm > 0.5:
                break
        u[:, j] = x / nrm
        basis = np.column_stack([basis, u[:, j]])
    return u


def svd(a, max_sweeps=MAX_SWEEPS):
    """Thin SVD ``a = U diag(sigma) V^T`` with sigma sorted nonincreasing."""
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        u, s, v = svd(a.T, max_sweeps)
        return SvdResult(v, s, u)
    if m > n or not _is_orthonormal(a):
        q, r = _qr_unchecked(a) if m > n else (np.eye(m), a.copy())
    else:
        return SvdResult(a.copy(), np.ones(n), np.eye(n))
    b, v = _jacobi_columns(r, max_sweeps)
    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, b, v = sigma[order], b[:, order], v[:, order]
    nonzero = sigma > EPS * n * max(sigma[0], 1e-300)
    u = np.zeros_like(b)
    u[:, nonzero] = b[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        u = _complete(u, nonzero)
    return SvdResult(q @ u, sigma, v)


def singular_values(a):
    return svd(a).sigma


def cond2(a):
    """2-norm condition number s_max / s_min.

    For numerically rank-deficient input (s_min <= 1e-12 s_max) the smallest
    singular value above that threshold is used and the result is flagged.
    """
    sigma = singular_values(a)
    if sigma[0] == 0.0:
        raise NumericalError("condition number of the zero matrix is undefined")
    keep = sigma > RANK_TOL * sigma[0]
    deficient = not keep.all()
    return Cond2(float(sigma[0] / sigma[keep][-1]), deficient)


def frob(a):
    return float(np.linalg.norm(a))


def solve_triangular(r, b, lower=False, trans=False):
    """Solve ``r x = b`` (or ``r^T x = b``) by substitution on a triangular ``r``."""
    from scipy.linalg import solve_triangular as _st

    return _st(r, b, lower=lower, trans="T" if trans else "N", check_finite=False)
