import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from tiltedflow.oracle import (
    Conditional, DegenerateTiltError, ExtrapolationError, GaussianBase, GridOracle1D, Identity,
    ResolutionError, RewardSpec, conditional_target_mean, gaussian_score, log_concavity_check,
    score_identity, tilt_gaussian,
)
from tiltedflow.schedule import Family, ScheduleSpec

FOLLMER = ScheduleSpec(Family.FOLLMER, 1.0)


@pytest.fixture(scope="module")
def std_normal():
    return GridOracle1D.gaussian(0.0, 1.0)


@pytest.fixture(scope="module")
def quartic():
    return GridOracle1D.from_logpdf(lambda y: -0.5 * y**2 - 0.25 * y**4, -6, 6, 6001,
                                    grad_fn=lambda y: -y - y**3)


def test_gaussian_score_examples():
    base = GaussianBase(1.0)
    assert np.allclose(gaussian_score(base, FOLLMER, 0.5, np.array([[1.0]])), -2.0)
    assert np.allclose(gaussian_score(base, FOLLMER, 0.3, np.zeros((1, 1))), 0.0)
    b2 = GaussianBase(2.0)
    x = np.array([[1.5]])
    assert np.allclose(gaussian_score(b2, FOLLMER, 1.0, x), -x / 4.0)


def test_tilt_linear():
    t = tilt_gaussian(GaussianBase(1.0), RewardSpec.linear([2.0]))
    assert np.allclose(t.mean, 2.0) and np.allclose(t.cov, 1.0) and np.isclose(t.log_normalizer, 2.0)


def test_tilt_zero_is_identity():
    t = tilt_gaussian(GaussianBase(1.7, 2), RewardSpec.zero(2))
    assert np.allclose(t.mean, 0) and np.allclose(t.cov, 1.7**2 * np.eye(2))
    assert t.log_normalizer == 0.0


def test_tilt_quadratic():
    t = tilt_gaussian(GaussianBase(1.0), RewardSpec.quadratic([[1.0]]))
    assert np.allclose(t.mean, 0) and np.allclose(t.cov, 0.5)
    assert np.isclose(t.log_normalizer, -0.5 * np.log(2))


@given(s1=st.floats(0.3, 2.0), lam=st.floats(-0.5, 3.0), a=st.floats(0.0, 1.5), c=st.floats(-2, 2))
@settings(max_examples=25, deadline=None)
def test_tilt_normalizer_matches_quadrature(s1, lam, a, c):
    if 1 / s1**2 + lam * a <= 0.05:
        return
    reward = RewardSpec.quadratic([[a]], [c], lam=lam)
    t = tilt_gaussian(GaussianBase(s1), reward)
    f = lambda x: np.exp(lam * (-0.5 * a * x * x + c * x) - 0.5 * x * x / s1**2) / np.sqrt(2 * np.pi * s1**2)
    z, _ = integrate.quad(f, -np.inf, np.inf)
    assert np.isclose(t.log_normalizer, np.log(z), rtol=1e-7, atol=1e-9)


def test_degenerate_tilt():
    with pytest.raises(DegenerateTiltError):
        tilt_gaussian(GaussianBase(1.0), RewardSpec.quadratic([[-2.0]]))


@pytest.mark.parametrize("which", list(Identity))
def test_identities_match_gaussian_score(std_normal, which):
    x = np.linspace(-2, 2, 9)
    for t in (0.2, 0.5, 0.8):
        ref = gaussian_score(GaussianBase(1.0), FOLLMER, t, x[:, None])[:, 0]
        assert np.allclose(score_identity(std_normal, which, FOLLMER, t, x), ref, atol=1e-6)


def test_nsi_is_exact_convex_combination(quartic):
    x = np.linspace(-1.5, 1.5, 7)
    for t in (0.3, 0.7):
        a, b = t, np.sqrt(t * (1 - t))
        csi = score_identity(quartic, "csi", FOLLMER, t, x)
        tsi = score_identity(quartic, "tsi", FOLLMER, t, x)
        nsi = score_identity(quartic, "nsi", FOLLMER, t, x)
        assert np.allclose(nsi, (a * a * tsi + b * b * csi) / (a * a + b * b), atol=1e-13)


def test_identities_agree_with_direct_score(quartic):
    x = np.linspace(-1.2, 1.2, 7)
    direct = quartic.direct_score(FOLLMER, 0.5, x)
    for which in Identity:
        assert np.allclose(score_identity(quartic, which, FOLLMER, 0.5, x), direct, atol=1e-5)


def test_symmetric_zero(quartic):
    for which in Identity:
        assert abs(score_identity(quartic, which, FOLLMER, 0.4, 0.0)[0]) < 1e-10
    assert abs(conditional_target_mean(quartic, FOLLMER, 0.4, 0.0)[0]) < 1e-10


def test_extrapolation_error(std_normal):
    with pytest.raises(ExtrapolationError):
        score_identity(std_normal, "csi", FOLLMER, 0.5, 100.0)


def test_conditional_mean_gaussian_base():
    base = GaussianBase(1.5)
    x = np.array([[0.7], [-1.2]])
    t = 0.35
    a, b = t, np.sqrt(t * (1 - t))
    out = conditional_target_mean(base, FOLLMER, t, x, Conditional.DATA_SCORE)
    assert np.allclose(out, -a * x / (b * b + a * a * 1.5**2))


def test_conditional_mean_grid_matches_gaussian(std_normal):
    x = np.linspace(-1, 1, 5)
    grid = conditional_target_mean(std_normal, FOLLMER, 0.6, x)
    ref = conditional_target_mean(GaussianBase(1.0), FOLLMER, 0.6, x[:, None])[:, 0]
    assert np.allclose(grid, ref, atol=1e-6)


def test_conditional_mean_at_terminal_time(quartic):
    x = np.array([-0.5, 0.8])
    assert np.allclose(conditional_target_mean(quartic, FOLLMER, 1.0, x), -x - x**3)


def test_log_concavity_gaussian_saturates(std_normal):
    for t in (0.25, 0.5, 0.75):
        assert abs(log_concavity_check(std_normal, 1.0, FOLLMER, t)) < 1e-4


def test_log_concavity_quartic(quartic):
    for t in (0.25, 0.5, 0.75, 0.999):
        assert log_concavity_check(quartic, 1.0, FOLLMER, t) >= -1e-4


def test_log_concavity_resolution_guard(std_normal):
    with pytest.raises(ResolutionError):
        log_concavity_check(std_normal, 1.0, FOLLMER, 0.5, n_grid=2)


def test_csv_roundtrip(tmp_path, quartic):
    path = tmp_path / "oracle.csv"
    quartic.to_csv(path)
    again = GridOracle1D.from_csv(path)
    assert np.array_equal(again.nodes, quartic.nodes)
    assert np.allclose(again.data_logpdf, quartic.data_logpdf, atol=1e-12)


def test_callback_laplacian_by_differences():
    r = RewardSpec.callback(lambda x: np.sin(x[:, 0]), lambda x: np.cos(x))
    x = np.array([[0.3], [1.1]])
    assert np.allclose(r.laplacian(x), -np.sin(x[:, 0]), atol=1e-6)
