import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiltedflow.dynamics import (
    AdjointPath, controlled_drift, gaussian_base_jacobian, generative_drift, memoryless_noise,
    simulate, solve_lean_adjoint,
)
from tiltedflow.model import AffineField
from tiltedflow.oracle import Conditional, GaussianBase, GridOracle1D, RewardSpec, conditional_target_mean, gaussian_score
from tiltedflow.schedule import Family, ScheduleSpec, alpha_beta, coefficients, exp_int_chi, time_grid
from tiltedflow.soc import (
    GridMismatchError, Method, UnsupportedError, am_targets, as_targets, bias_variance_split,
    control_cost, divergence_witness, per_group_gradients, regression_loss_grad, score_targets,
    sm_targets, table1_bound, table1_coefficient, table1_numeric,
)

FOLLMER = ScheduleSpec(Family.FOLLMER, 1.0)


def reference(sched, sigma1=1.0, paths=16, steps=50, seed=0):
    base = GaussianBase(sigma1)
    drift = generative_drift(sched, lambda x, t: gaussian_score(base, sched, t, x))
    grid = time_grid(sched, steps)
    _, b0 = alpha_beta(sched, grid[0])
    return simulate(drift, memoryless_noise(sched), lambda z: b0 * z, grid, seed=seed, paths=paths), drift


def test_am_zero_reward_gives_zero_targets():
    traj, _ = reference(FOLLMER)
    adj = solve_lean_adjoint(traj, gaussian_base_jacobian(FOLLMER, 1.0), lambda x: np.zeros_like(x))
    s = am_targets(traj, adj, FOLLMER)
    assert np.all(s.u_target == 0)
    loss, grad = regression_loss_grad(AffineField.uniform(5), s)
    assert loss == 0 and np.all(grad == 0)


@pytest.mark.parametrize("fam", [Family.FOLLMER, Family.RECTIFIED_FLOW])
def test_am_linear_target_matches_closed_form(fam):
    sched = ScheduleSpec(fam, 1.0)
    traj, _ = reference(sched, sigma1=1.3, steps=400)
    reward = RewardSpec.linear([0.7], lam=2.0)
    adj = solve_lean_adjoint(traj, gaussian_base_jacobian(sched, 1.3), reward.grad)
    s = am_targets(traj, adj, sched)
    ratio = exp_int_chi(sched, 1.3, s.t) / exp_int_chi(sched, 1.3, traj.grid[-1])
    exact = coefficients(sched, s.t).sigma_mem * ratio * 1.4
    # explicit Euler is least accurate where χ is stiff near t = 0
    away = s.t > 0.1
    assert np.allclose(s.u_target[away, 0], exact[away], rtol=5e-3)


def test_unified_identity_is_pointwise():
    sched = ScheduleSpec(Family.DDIM, 1.0)
    traj, drift = reference(sched)
    adj = solve_lean_adjoint(traj, gaussian_base_jacobian(sched, 1.0), lambda x: 1 + x)
    s = am_targets(traj, adj, sched, base_drift=drift)
    u = np.random.default_rng(0).normal(size=s.u_target.shape)
    v_ft = s.v_base + s.sigma[:, None] * u
    assert np.allclose(s.control_residual(u), s.unified_residual(v_ft), rtol=1e-12, atol=1e-12)


def test_am_grid_mismatch():
    traj, _ = reference(FOLLMER)
    bad = AdjointPath(traj.grid[:-1], traj.states[:, :-1])
    with pytest.raises(GridMismatchError):
        am_targets(traj, bad, FOLLMER)


def test_as_target_factors():
    rng = np.random.default_rng(0)
    x1 = rng.normal(size=(50, 1))
    zero = as_targets(x1, RewardSpec.zero(), FOLLMER, GaussianBase(1.0), 3, rng)
    assert np.all(zero.u_target == 0) and len(zero) == 150
    reward = RewardSpec.linear([1.5])
    s = as_targets(x1, reward, FOLLMER, GaussianBase(1.0), 2, rng)
    assert np.allclose(s.u_target[:, 0], coefficients(FOLLMER, s.t).sigma_mem * 1.5)
    ddim = ScheduleSpec(Family.DDIM, 1.0)
    s = as_targets(x1, reward, ddim, GaussianBase(1.0), 2, rng)
    assert np.allclose(s.u_target[:, 0], np.sqrt(s.t) * coefficients(ddim, s.t).sigma_mem * 1.5)


def test_as_requires_gaussian_base():
    with pytest.raises(UnsupportedError):
        as_targets(np.zeros((2, 1)), RewardSpec.zero(), FOLLMER, GridOracle1D.gaussian(), 1,
                   np.random.default_rng(0))


def test_nsm_target_matches_nsi_formula():
    rng = np.random.default_rng(1)
    y, eps = rng.normal(size=(20, 1)), rng.normal(size=(20, 1))
    t = rng.uniform(0.05, 0.95, 20)
    x, s = score_targets("NSM", y, eps, t, FOLLMER, score_fn=lambda v: -v)
    a, b = t[:, None], np.sqrt(t * (1 - t))[:, None]
    assert np.allclose(s, (a * (-y) - (x - a * y)) / (a**2 + b**2))


def test_csm_zero_noise():
    x, s = score_targets("CSM", np.array([[0.4]]), np.zeros((1, 1)), 0.3, FOLLMER)
    assert np.allclose(x, 0.3 * 0.4) and np.all(s == 0)


def test_missing_score_rejected():
    with pytest.raises(UnsupportedError):
        score_targets("TSM", np.zeros((1, 1)), np.zeros((1, 1)), 0.5, FOLLMER)
    with pytest.raises(UnsupportedError):
        score_targets("iDEM", np.zeros((1, 1)), np.zeros((1, 1)), 0.5, FOLLMER, score_fn=lambda v: -v)


def test_idem_converges_to_conditional_mean():
    quartic = GridOracle1D.from_logpdf(lambda y: -0.5 * y**2 - 0.25 * y**4, -6, 6, 4001,
                                       grad_fn=lambda y: -y - y**3)
    t, xv = 0.5, 0.3
    a, b = alpha_beta(FOLLMER, t)
    y = np.full((1, 1), xv / a)
    ests = []
    for seed in range(20):
        _, s = score_targets("iDEM", y, np.zeros((1, 1)), t, FOLLMER,
                             score_fn=lambda v: -v - v**3,
                             data_logpdf=lambda v: -0.5 * v[:, 0] ** 2 - 0.25 * v[:, 0] ** 4,
                             idem_n=10_000, rng=np.random.default_rng(seed))
        ests.append(s[0, 0])
    ref = conditional_target_mean(quartic, FOLLMER, t, xv, Conditional.DATA_SCORE)[0] / a
    ests = np.array(ests)
    assert abs(ests.mean() - ref) < 3 * ests.std(ddof=1) / np.sqrt(ests.size) + 1e-4


def test_sm_unified_form():
    rng = np.random.default_rng(2)
    y, eps = rng.normal(size=(10, 1)), rng.normal(size=(10, 1))
    t = rng.uniform(0.1, 0.9, 10)
    s = sm_targets("CSM", y, eps, t, FOLLMER)
    c = coefficients(FOLLMER, t)
    x, shat = score_targets("CSM", y, eps, t, FOLLMER)
    assert np.allclose(s.xi, c.kappa[:, None] * x + 2 * c.eta[:, None] * shat)
    assert np.allclose(s.weight, 1 / (2 * c.eta))


def test_bias_variance_deterministic_target():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(200, 1))
    s = sm_targets("CSM", y, np.zeros_like(y), rng.uniform(0.1, 0.9, 200), FOLLMER)
    rep = bias_variance_split(s, lambda t, x: s.xi[s.t == t])
    assert rep.variance_est == 0.0


def test_expected_gradient_unchanged_by_conditioning():
    # swapping targets for their conditional means leaves the gradient unbiased
    rng = np.random.default_rng(4)
    x1 = rng.normal(size=(4000, 1))
    reward = RewardSpec.quadratic([[1.0]])
    s = as_targets(x1, reward, FOLLMER, GaussianBase(1.0), 1, rng)
    c = coefficients(FOLLMER, s.t)
    f = AffineField.uniform(3).set_blocks(0.3, -0.2)
    per = per_group_gradients(f, s)
    # ∇r(y) = −y, so E[target | X̄_t] = −σ(t)·E[Y | X̄_t]
    diff = per - per_group_gradients(f, s, -c.sigma_mem[:, None] * _post_mean(s))
    se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
    assert np.all(np.abs(diff.mean(axis=0)) < 4 * se + 1e-12)


def _post_mean(s):
    # E[X₁ | X̄_t] for a N(0,1) base under Föllmer σ₀=1
    a = s.t[:, None]
    b2 = (s.t * (1 - s.t))[:, None]
    return a * s.x_t / (a * a + b2)


def test_loss_gradient_matches_per_group_total():
    rng = np.random.default_rng(5)
    s = as_targets(rng.normal(size=(30, 1)), RewardSpec.linear([1.0]), FOLLMER, GaussianBase(1.0), 2, rng)
    f = AffineField.uniform(4).set_blocks(0.1, 0.5)
    _, g = regression_loss_grad(f, s)
    assert np.allclose(per_group_gradients(f, s).sum(axis=0) / 30, g)


def test_table1_examples():
    for fam in Family:
        assert table1_coefficient("AMAS", fam, 1.0, 1.7) == pytest.approx(1.7**2 / 2)
        assert math.isinf(table1_coefficient("TSM", fam))
    assert table1_coefficient("NSM", Family.RECTIFIED_FLOW) == pytest.approx((math.pi - 2) / 4)
    assert table1_coefficient("NSM", Family.DDIM) == pytest.approx(0.5)
    rep = table1_bound("CSM", Family.DDIM)
    assert rep.infinite and rep.bound is None
    assert json.loads(rep.to_json())["coefficient"] is None


@pytest.mark.parametrize("fam", list(Family))
@given(s0=st.floats(0.4, 2.5))
@settings(max_examples=8, deadline=None)
def test_nsm_closed_form_matches_quadrature(fam, s0):
    sched = ScheduleSpec(fam, s0)
    assert table1_numeric("NSM", sched) == pytest.approx(table1_coefficient("NSM", fam, s0), rel=1e-6)


@pytest.mark.parametrize("fam", list(Family))
def test_amas_coefficient_matches_quadrature(fam):
    assert table1_numeric("AMAS", ScheduleSpec(fam, 1.0), 1.0) == pytest.approx(0.5, rel=1e-6)


@pytest.mark.parametrize("method", ["TSM", "iDEM"])
@pytest.mark.parametrize("fam", list(Family))
def test_divergent_cells_grow(method, fam):
    sched = ScheduleSpec(fam, 1.0)
    w2, w3 = divergence_witness(method, sched, 1e-2), divergence_witness(method, sched, 1e-3)
    assert w3["partial"] > 5 * w2["partial"]
    assert w3["growth"] > 0.1


def test_control_cost_examples():
    traj, _ = reference(FOLLMER, paths=4000, steps=100)
    zero_u = lambda x, t: np.zeros_like(x)
    assert control_cost(zero_u, traj, RewardSpec.zero()) == (0.0, 0.0)
    mean, se = control_cost(zero_u, traj, RewardSpec.linear([2.0]))
    assert abs(mean) < 3 * se


def test_control_cost_at_optimum():
    # Föllmer σ₀=σ₁=1: optimal control is σ(t)·∇r, cost −log E[e^{2X}] = −2
    base = GaussianBase(1.0)
    noise = memoryless_noise(FOLLMER)
    drift = generative_drift(FOLLMER, lambda x, t: gaussian_score(base, FOLLMER, t, x))
    u_star = lambda x, t: noise(t) * 2.0 * np.ones_like(x)
    grid = time_grid(FOLLMER, 200)
    _, b0 = alpha_beta(FOLLMER, grid[0])
    traj = simulate(controlled_drift(drift, noise, u_star), noise, lambda z: b0 * z, grid,
                    seed=1, paths=4000)
    mean, se = control_cost(u_star, traj, RewardSpec.linear([2.0]))
    assert abs(mean + 2.0) < 3 * se + 0.01
