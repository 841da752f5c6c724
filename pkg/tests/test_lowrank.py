import numpy as np
import pytest
from hypothesis import given, strategies as st

from condlr import linalg, lowrank
from condlr.errors import DimensionError, InfeasibleRankError, SingularFactorError
from condlr.lowrank import FactorizedLayer, OptState, TrainVariant, UVLayer
from condlr.nn import DenseLayer
from condlr.verify import random_orthonormal, tangent_bridge_check

from oracles import heavy_ball, select_rank_scan

CONDLR = TrainVariant("condlr", 0.1)


def make_layer(n=8, m=6, r=3, tau=0.1, seed=0, variant=None):
    layer = lowrank.init_factorized(n, m, r, rng=seed, tau=tau)
    return lowrank.prepare_layer(layer, variant or TrainVariant("condlr", tau))


def band_ok(layer, slack=1e-12):
    sig = linalg.svd(layer.S).sigma
    return np.all(sig >= layer.s_band - layer.eps_band - slack) and \
        np.all(sig <= layer.s_band + layer.eps_band + slack)


# ----------------------------------------------------------------------------- select_rank

def test_select_rank_frozen_values():
    assert lowrank.select_rank(100, 100, 0.5) == 22
    assert lowrank.select_rank(784, 256, 0.8) == 37


def test_select_rank_infeasible():
    with pytest.raises(InfeasibleRankError, match="fc3"):
        lowrank.select_rank(10, 10, 0.99, name="fc3")


@given(st.integers(4, 300), st.integers(4, 300), st.floats(0.05, 0.9))
def test_select_rank_matches_scan(n, m, alpha):
    expect = select_rank_scan(n, m, alpha)
    if expect is None:
        with pytest.raises(InfeasibleRankError):
            lowrank.select_rank(n, m, alpha)
        return
    r = lowrank.select_rank(n, m, alpha)
    assert r == expect
    assert lowrank.compression(n, m, r) >= alpha - 1e-12


def test_parameter_accounting():
    layer = make_layer(20, 30, 5)
    assert layer.num_params() == 5 * (20 + 30 + 5) + 20
    layer.bias = None
    assert layer.num_params() == 5 * 55


# ----------------------------------------------------------------------------- init

def test_exp_decay_spectrum():
    layer = lowrank.init_factorized(10, 8, 4, "exp_decay", rng=0)
    assert np.array_equal(np.diag(layer.S), [1.0, 0.5, 0.25, 0.125])


@pytest.mark.parametrize("scheme", ["svd_of_gaussian", "exp_decay"])
def test_init_orthonormal(scheme):
    layer = lowrank.init_factorized(12, 9, 5, scheme, rng=3)
    assert np.linalg.norm(layer.U.T @ layer.U - np.eye(5)) <= 1e-10
    assert np.linalg.norm(layer.V.T @ layer.V - np.eye(5)) <= 1e-10


def test_svd_init_is_best_rank_r_approximation(rng):
    W0 = rng.standard_normal((9, 7))
    layer = lowrank.init_factorized(9, 7, 3, W0=W0)
    U, s, Vt = np.linalg.svd(W0)
    best = (U[:, :3] * s[:3]) @ Vt[:3]
    assert np.linalg.norm(layer.weight() - best) <= 1e-10
    assert np.linalg.norm(W0 - layer.weight()) == pytest.approx(np.sqrt(np.sum(s[3:] ** 2)), rel=1e-10)


# ----------------------------------------------------------------------------- projections

def test_band_projection_example():
    S2, s, eps = lowrank.sigma_band_project(np.diag([2.0, 1.0, 0.5]), 0.5)
    assert s == pytest.approx(np.sqrt(1.75), abs=1e-6) and s == pytest.approx(1.322876, abs=1e-6)
    assert eps == pytest.approx(0.264575, abs=1e-6)
    assert np.allclose(linalg.svd(S2).sigma, [1.587451, 1.058300, 1.058300], atol=1e-6)
    assert linalg.cond2(S2).value == pytest.approx(1.5, abs=1e-12)


def test_band_projection_not_idempotent():
    # Clamping moves the rms, so a second pass uses a different band centre.
    S2, s, _ = lowrank.sigma_band_project(np.diag([2.0, 1.0, 0.5]), 0.5)
    S3, s3, _ = lowrank.sigma_band_project(S2, 0.5)
    assert s3 < s and linalg.cond2(S3).value <= 1.5 + 1e-12


def test_band_projection_zero_width(rng):
    S2, s, eps = lowrank.sigma_band_project(rng.standard_normal((4, 4)), 0.0)
    assert eps == 0.0 and np.allclose(linalg.svd(S2).sigma, s, rtol=1e-12)


@given(st.floats(0.1, 10), st.floats(0, 2), st.integers(0, 1000))
def test_band_projection_fixed_point(c, tau, seed):
    S = c * random_orthonormal(4, 4, np.random.default_rng(seed))
    S2, s, _ = lowrank.sigma_band_project(S, tau)
    assert s == pytest.approx(c, rel=1e-12)
    assert np.abs(S2 - S).max() <= 1e-12 * c


@given(st.floats(0, 2), st.integers(0, 1000))
def test_band_projection_bounds_cond(tau, seed):
    S = np.random.default_rng(seed).standard_normal((5, 5))
    S2, _, _ = lowrank.sigma_band_project(S, tau)
    assert linalg.cond2(S2).value <= 1 + tau + 1e-10


def test_stiefel_scale_examples():
    assert np.allclose(lowrank.stiefel_scale_project(3 * np.eye(3)), 3 * np.eye(3), atol=1e-15)
    S2 = lowrank.stiefel_scale_project(np.array([[2.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(linalg.svd(S2).sigma, 1.581139, atol=1e-6)


@given(st.integers(0, 1000))
def test_variant_equivalence_of_spectra(seed):
    S = np.random.default_rng(seed).standard_normal((5, 5))
    a = linalg.svd(lowrank.sigma_band_project(S, 0.0)[0]).sigma
    b = linalg.svd(lowrank.stiefel_scale_project(S)).sigma
    assert np.allclose(a, b, rtol=1e-10)


def test_band_projection_rejects_zero():
    with pytest.raises(SingularFactorError):
        lowrank.sigma_band_project(np.zeros((2, 2)), 0.1)


# ----------------------------------------------------------------------------- gradients

def test_factor_gradients_zero():
    layer = make_layer()
    assert all(not g.any() for g in lowrank.factor_gradients(np.zeros((8, 6)), layer))


def test_factor_gradients_shape_check():
    with pytest.raises(DimensionError):
        lowrank.factor_gradients(np.zeros((6, 8)), make_layer())


@pytest.mark.parametrize("seed", range(5))
def test_factor_gradients_finite_differences(seed):
    from condlr.verify import factor_gradient_check
    assert factor_gradient_check(seed) <= 1e-5


def test_riemannian_annihilates_range_of_u(rng):
    layer = make_layer()
    gu = layer.U @ rng.standard_normal((3, 3))
    g1, _, _ = lowrank.riemannian_gradients(gu, np.zeros((3, 3)), np.zeros((6, 3)), layer)
    assert np.abs(g1).max() <= 1e-14


def test_riemannian_scalar_case(rng):
    U, V = random_orthonormal(8, 3, rng), random_orthonormal(6, 3, rng)
    layer = FactorizedLayer(U, 2.0 * np.eye(3), V, tau=0.3, s_band=2.0, eps_band=0.0)
    gu = rng.standard_normal((8, 3))
    gu -= U @ (U.T @ gu)
    g1, _, _ = lowrank.riemannian_gradients(gu, np.zeros((3, 3)), np.zeros((6, 3)), layer)
    assert np.allclose(g1, gu / 4.0, atol=1e-14)


@pytest.mark.parametrize("tau", [0.0, 0.1, 0.5])
def test_riemannian_matches_tangent_projector(tau):
    assert tangent_bridge_check(3, tau=tau) <= 1e-10


def test_riemannian_singular_core_raises(rng):
    U, V = random_orthonormal(5, 2, rng), random_orthonormal(4, 2, rng)
    layer = FactorizedLayer(U, np.diag([1.0, 0.0]), V, tau=0.1)
    with pytest.raises(SingularFactorError, match="band"):
        lowrank.riemannian_gradients(np.ones((5, 2)), np.ones((2, 2)), np.ones((4, 2)), layer)


# ----------------------------------------------------------------------------- steps

def test_zero_gradient_is_fixed_point(rng):
    # Fixed point needs S inside the band of its own rms value.
    U, V = random_orthonormal(8, 3, rng), random_orthonormal(6, 3, rng)
    layer = FactorizedLayer(U, np.diag([1.02, 1.0, 0.98]), V, tau=0.1)
    U, S, V = layer.U.copy(), layer.S.copy(), layer.V.copy()
    lowrank.condlr_step(layer, np.zeros((8, 6)), OptState(0.1), CONDLR)
    assert np.array_equal(layer.U, U) and np.array_equal(layer.V, V)
    assert np.allclose(layer.S, S, atol=1e-14)


@pytest.mark.parametrize("tau", [0.0, 0.1, 0.5])
def test_step_invariants(tau):
    rng = np.random.default_rng(1)
    variant = TrainVariant("condlr", tau)
    layer = make_layer(10, 7, 4, tau, variant=variant)
    opt = OptState(0.3, 0.9)
    for _ in range(25):
        lowrank.condlr_step(layer, rng.standard_normal((10, 7)), opt, variant)
        assert np.linalg.norm(layer.U.T @ layer.U - np.eye(4)) <= 1e-8 * 4
        assert np.linalg.norm(layer.V.T @ layer.V - np.eye(4)) <= 1e-8 * 4
        assert band_ok(layer)
        sw = np.linalg.svd(layer.weight(), compute_uv=False)[:4]
        assert np.allclose(sw, linalg.svd(layer.S).sigma, atol=1e-8)
        assert sw[0] / sw[-1] <= 1 + tau + 1e-8


def test_quadratic_oracle_converges():
    rng = np.random.default_rng(0)
    A = random_orthonormal(8, 3, rng) @ np.diag([1.03, 1.0, 0.97]) @ random_orthonormal(6, 3, rng).T
    layer = make_layer(8, 6, 3, 0.1, seed=0)
    opt = OptState(0.5)
    losses = []
    for _ in range(50):
        W = layer.weight()
        losses.append(0.5 * np.sum((W - A) ** 2))
        lowrank.condlr_step(layer, W - A, opt, CONDLR)
    active = [l for l in losses if l > 1e-20]
    assert all(b < a for a, b in zip(active, active[1:]))
    assert np.linalg.norm(layer.weight() - A) <= 1e-3


def test_descent_sanity_small_step():
    rng = np.random.default_rng(2)
    A = random_orthonormal(8, 3, rng) @ np.diag([2.0, 1.0, 0.5]) @ random_orthonormal(6, 3, rng).T
    layer = make_layer(8, 6, 3, 0.1, seed=4)
    opt = OptState(0.01)
    for _ in range(20):
        W = layer.weight()
        before = 0.5 * np.sum((W - A) ** 2)
        gu, gs, gv = lowrank.factor_gradients(W - A, layer)
        g1, g2, g3 = lowrank.riemannian_gradients(gu, gs, gv, layer)
        S_pre = layer.S - opt.lr * g3
        lowrank.condlr_step(layer, W - A, opt, CONDLR)
        after = 0.5 * np.sum((layer.weight() - A) ** 2)
        slack = np.linalg.norm(S_pre - layer.S) * (np.linalg.norm(layer.weight() - A) + 1.0)
        assert after <= before + slack


def test_unit_and_noband_variants():
    rng = np.random.default_rng(5)
    unit = make_layer(variant=TrainVariant("unit"))
    noband = make_layer(variant=TrainVariant("noband"))
    for _ in range(5):
        G = rng.standard_normal((8, 6))
        lowrank.condlr_step(unit, G, OptState(0.1), TrainVariant("unit"))
        lowrank.condlr_step(noband, G, OptState(0.1), TrainVariant("noband"))
    assert np.allclose(linalg.svd(unit.S).sigma, 1.0, atol=1e-12)
    assert noband.eps_band == float("inf")


def test_condlr_step_rejects_baseline_variant():
    with pytest.raises(ValueError):
        lowrank.condlr_step(make_layer(), np.zeros((8, 6)), OptState(0.1), TrainVariant("full"))


def test_projected_sgd_keeps_cond_one(rng):
    variant = TrainVariant("projected_sgd")
    for shape in [(7, 4), (4, 7)]:
        layer = lowrank.build_layer(variant, *shape, rng=0)
        lowrank.baseline_step(layer, rng.standard_normal(shape), OptState(0.5), variant)
        assert linalg.cond2(layer.W).value == pytest.approx(1.0, abs=1e-8)


def test_vanilla_uv_zero_gradient_unchanged():
    variant = TrainVariant("vanilla_uv")
    layer = lowrank.build_layer(variant, 6, 5, 2, rng=0)
    U, V = layer.U.copy(), layer.V.copy()
    lowrank.baseline_step(layer, np.zeros((6, 5)), OptState(0.1, 0.5), variant)
    assert np.array_equal(layer.U, U) and np.array_equal(layer.V, V)


def test_vanilla_uv_alternates(rng):
    variant = TrainVariant("vanilla_uv")
    layer = lowrank.build_layer(variant, 6, 5, 2, rng=0)
    U0, V0 = layer.U.copy(), layer.V.copy()
    G = rng.standard_normal((6, 5))
    lowrank.baseline_step(layer, G, OptState(0.1), variant)
    U1 = U0 - 0.1 * G @ V0
    assert np.allclose(layer.U, U1, atol=1e-15)
    assert np.allclose(layer.V, V0 - 0.1 * G.T @ U1, atol=1e-15)


def test_full_matches_heavy_ball_oracle():
    variant = TrainVariant("full")
    a, w0, lr, beta = 3.0, -1.0, 0.1, 0.6
    layer = DenseLayer([[w0]], None)
    opt = OptState(lr, beta)
    traj = []
    for _ in range(30):
        lowrank.baseline_step(layer, layer.W - a, opt, variant)
        traj.append(layer.W[0, 0])
    ref = heavy_ball(w0, lambda w: w - a, lr, beta, 30)
    assert np.abs(np.array(traj) - ref).max() <= 1e-14


def test_baseline_storage_checks():
    with pytest.raises(DimensionError):
        lowrank.baseline_step(make_layer(), np.zeros((8, 6)), OptState(0.1), TrainVariant("full"))
    uv = UVLayer(np.ones((3, 1)), np.ones((2, 1)))
    with pytest.raises(DimensionError):
        lowrank.baseline_step(uv, np.zeros((2, 3)), OptState(0.1), TrainVariant("vanilla_uv"))


def test_momentum_buffer_shape_check():
    opt = OptState(0.1, 0.5)
    opt.update("U", np.ones(3))
    with pytest.raises(DimensionError):
        opt.update("U", np.ones(4))


def test_optstate_validation():
    with pytest.raises(ValueError):
        OptState(0.0)
    with pytest.raises(ValueError):
        OptState(0.1, 1.0)


def test_variant_parse():
    v = TrainVariant.parse("condlr(tau=0.5)")
    assert v.tag == "condlr" and v.tau == 0.5 and v.label == "condlr(tau=0.5)"
    assert TrainVariant("unit", 0.3).tau == 0.0
    with pytest.raises(ValueError):
        TrainVariant("adam")
