import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from condlr import verify
from condlr.errors import DimensionError
from condlr.verify import (ConstructedTrajectory, TangentPoint, TheoremCheckSpec, expm,
                           integrate_projected_flow, random_orthonormal, random_skew, tangent_project)


def point(seed, n=7, m=5, r=2):
    rng = np.random.default_rng(seed)
    return TangentPoint(random_orthonormal(n, r, rng), np.diag(rng.uniform(0.5, 2, r)),
                        random_orthonormal(m, r, rng)), rng


def test_projector_fixes_tangent_vectors():
    p, rng = point(0)
    Y = rng.standard_normal((7, 2))
    Y -= p.U @ (p.U.T @ Y)
    Z = rng.standard_normal((5, 2))
    Z -= p.V @ (p.V.T @ Z)
    B = p.U @ rng.standard_normal((2, 2)) @ p.V.T + Y @ p.V.T + p.U @ Z.T
    assert np.abs(tangent_project(p, B) - B).max() <= 1e-13


def test_projector_kills_normal_space():
    p, rng = point(1)
    Uc = scipy.linalg.null_space(p.U.T)
    Vc = scipy.linalg.null_space(p.V.T)
    B = Uc @ rng.standard_normal((Uc.shape[1], Vc.shape[1])) @ Vc.T
    assert np.abs(tangent_project(p, B)).max() <= 1e-14


@given(st.integers(0, 10_000))
def test_projector_idempotent_selfadjoint_linear(seed):
    p, rng = point(seed)
    A, B = rng.standard_normal((7, 5)), rng.standard_normal((7, 5))
    PA = tangent_project(p, A)
    assert np.abs(tangent_project(p, PA) - PA).max() <= 1e-12
    assert np.sum(PA * B) == pytest.approx(np.sum(A * tangent_project(p, B)), abs=1e-12)
    assert np.allclose(tangent_project(p, 2 * A - B), 2 * PA - tangent_project(p, B), atol=1e-12)


def test_projector_shape_check():
    p, _ = point(2)
    with pytest.raises(DimensionError):
        tangent_project(p, np.zeros((5, 7)))


@pytest.mark.parametrize("scale", [1e-3, 0.3, 2.0, 40.0])
def test_expm_matches_scipy(scale):
    A = random_skew(6, np.random.default_rng(0)) * scale
    E = expm(A)
    assert np.abs(E - scipy.linalg.expm(A)).max() <= 1e-12 * max(1.0, np.abs(E).max())
    assert np.abs(E.T @ E - np.eye(6)).max() <= 1e-12


def test_curvature_rows_and_spread():
    rows = verify.curvature_check()
    assert [r.s_min for r in rows] == [1.0, 0.1, 0.01]
    assert verify.curvature_spread(rows) <= 10.0


def test_curvature_well_conditioned_bound():
    rows = verify.curvature_check(s_min_list=(1.0,), trials=20, seed=3)
    assert rows[0].rho_max < 4.0  # ||B||_F = 1


def test_curvature_halving_doubles_ratio():
    rows = verify.curvature_check(s_min_list=(0.2, 0.1), trials=20, seed=5)
    ratio = rows[1].rho_median / rows[0].rho_median
    assert 2 / 3 <= ratio <= 6


def test_curvature_rejects_bad_sweep():
    with pytest.raises(ValueError):
        verify.curvature_check(s_min_list=(0.1, 1.0))


def test_theorem_spec_constants():
    spec = TheoremCheckSpec()
    assert spec.lam_max == pytest.approx(0.9 / (4 * np.sqrt(2e-3)), rel=1e-14)
    assert spec.lam_max == pytest.approx(5.0312, abs=1e-4)
    assert spec.gamma == pytest.approx(32 / 0.81)
    with pytest.raises(ValueError):
        TheoremCheckSpec(eps=1.5)


def test_trajectory_velocity_bound():
    traj = ConstructedTrajectory(TheoremCheckSpec(seed=2), np.random.default_rng(2))
    for t in (0.0, 1.0, 5.0):
        assert np.linalg.norm(traj.velocity(t)) <= 1.0 + 1e-12
        h = 1e-5
        num = (traj.value(t + h) - traj.value(t - h)) / (2 * h)
        assert np.abs(num - traj.velocity(t)).max() <= 1e-8


def test_stationary_flow_stays_put():
    traj = ConstructedTrajectory(TheoremCheckSpec(seed=1), np.random.default_rng(1))
    traj.O1[:] = 0
    traj.O2[:] = 0
    traj.eta = 0.0
    _, ys = integrate_projected_flow(traj, 2.0, 50)
    assert all(np.array_equal(y, ys[0]) for y in ys)


def test_eta_zero_tracks_exactly():
    res = verify.theorem2_check(TheoremCheckSpec(eta=0.0, lam=5.0))
    assert res.max_error <= 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_theorem_bound_at_admissible_step(seed):
    res = verify.theorem2_check(TheoremCheckSpec(seed=seed))
    assert res.certified and res.passed
    assert np.all(res.errors <= res.bounds + 1e-8)


def test_theorem_step_above_bound_not_certified():
    res = verify.theorem2_check(TheoremCheckSpec(lam=20.0, substeps=200))
    assert not res.certified and res.passed is None and "exceeds" in res.notes[0]


def test_multistep_ratio_reported():
    res = verify.theorem2_check(TheoremCheckSpec(steps=2, substeps=100))
    assert res.multistep_ratio is not None and res.multistep_ratio > 0


@pytest.mark.parametrize("tau", [0.0, 0.1, 0.5])
def test_tangent_bridge(tau):
    for seed in range(5):
        assert verify.tangent_bridge_check(seed, tau=tau) <= 1e-10
