"""Thermodynamic estimators for the annealed tilt p_t^base·e^{r_t}.

The escorted forward process is

    dY = (κY + (σ²/2 + η)(𝔰 + ∇r_t) + v) dt + σ dW,   Y_{t_min} ~ p*_{t_min},

and its backward partner uses (η − σ²/2) in place of (σ²/2 + η), generated
from p*_{t_max}.  Backward paths are stored in forward time:
Y_{k+1} − Y_k = Δt·b(Y_{k+1}) + σ(t_{k+1})·←ΔW_k.

All estimators work on the simulation window [t_min, t_max], so free-energy
differences are F(t_max) − F(t_min) with F_t = log E_{p_t^base}[e^{r_t}].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import logsumexp, ndtr

from .dynamics import PathBundle, memoryless_noise, simulate, simulate_backward, to_bundle
from .model import FunctionField, ModelError, VectorField, zero_field
from .oracle import (GaussianBase, GridOracle1D, RewardKind, RewardSpec, TiltedGaussian,
                     gaussian_score, tilt_gaussian)
from .schedule import ScheduleSpec, as_column, coefficients, marginal_var, time_grid


class CapabilityError(ValueError):
    pass


class LowEssError(RuntimeError):
    pass


def _linear(t):
    return t


def _one(t):
    return 1.0


def _square(t):
    return t * t


def _twice(t):
    return 2.0 * t


# named annealing schedules λ(t) with λ(0) = 0 and λ(1) = 1, paired with λ'(t)
LAMBDA_PATHS = {"linear": (_linear, _one), "quadratic": (_square, _twice)}


@dataclass(frozen=True)
class RewardPath:
    """r_t = λ(t)·r with λ(1) = 1."""

    reward: RewardSpec
    lam: Callable[[float], float] = _linear
    lam_dot: Callable[[float], float] = _one

    def value(self, x, t):
        return self.lam(t) * self.reward.value(x)

    def grad(self, x, t):
        return self.lam(t) * self.reward.grad(x)

    def laplacian(self, x, t):
        return self.lam(t) * self.reward.laplacian(x)

    def time_derivative(self, x, t):
        return self.lam_dot(t) * self.reward.value(x)

    @classmethod
    def named(cls, reward: RewardSpec, name: str = "linear") -> "RewardPath":
        lam, lam_dot = LAMBDA_PATHS[name]
        return cls(reward, lam, lam_dot)

    def at(self, t) -> RewardSpec:
        """Reward spec of r_t (closed-form kinds only)."""
        return replace(self.reward, lam=self.reward.lam * self.lam(t))


@dataclass(frozen=True)
class ThermoProblem:
    sched: ScheduleSpec
    base: GaussianBase
    path: RewardPath
    noise: Callable | None = None

    @property
    def dim(self) -> int:
        return self.base.dim

    def sigma(self, t) -> float:
        return float((self.noise or memoryless_noise(self.sched))(t))

    def score(self, x, t):
        return gaussian_score(self.base, self.sched, t, x)

    def base_std(self, t) -> float:
        return float(np.sqrt(marginal_var(self.sched, self.base.sigma1, t)))

    # drifts --------------------------------------------------------------
    def drift(self, v: VectorField, forward: bool = True):
        def b(x, t):
            c = coefficients(self.sched, t)
            sig2 = self.sigma(t) ** 2
            gain = c.eta + (0.5 * sig2 if forward else -0.5 * sig2)
            return c.kappa * x + gain * (self.score(x, t) + self.path.grad(x, t)) + v.eval(x, t)
        return b

    def reference_drift(self, forward: bool = True):
        def g(x, t):
            c = coefficients(self.sched, t)
            sig2 = self.sigma(t) ** 2
            gain = c.eta + (0.5 * sig2 if forward else -0.5 * sig2)
            return c.kappa * x + gain * self.score(x, t)
        return g

    # annealed targets ----------------------------------------------------
    def closed_form(self) -> bool:
        return self.path.reward.kind in (RewardKind.LINEAR, RewardKind.QUADRATIC)

    def target(self, t) -> TiltedGaussian:
        """p*_t as a Gaussian (linear or quadratic rewards)."""
        if not self.closed_form():
            raise CapabilityError("closed-form p*_t needs a linear or quadratic reward")
        return tilt_gaussian(GaussianBase(self.base_std(t), self.dim), self.path.at(t))

    def free_energy(self, t) -> float:
        """F_t = log E_{p_t^base}[e^{r_t}], analytic or by Gauss–Hermite quadrature."""
        if self.closed_form():
            return float(self.target(t).log_normalizer)
        if self.dim != 1:
            raise CapabilityError("quadrature free energy is one-dimensional")
        nodes, weights = np.polynomial.hermite_e.hermegauss(160)
        x = self.base_std(t) * nodes[:, None]
        vals = self.path.value(x, t)
        return float(logsumexp(vals, b=weights) - 0.5 * np.log(2 * np.pi))

    def sampler(self, t):
        """Map standard normals (n, d) to draws from p*_t."""
        if self.closed_form():
            tg = self.target(t)
            chol = np.linalg.cholesky(tg.cov)
            return lambda z: tg.mean + z @ chol.T
        if self.dim != 1:
            raise CapabilityError("non-Gaussian annealed targets are one-dimensional only")
        s = self.base_std(t)
        grid = GridOracle1D.from_logpdf(
            lambda y: -0.5 * y**2 / s**2 + self.path.value(y[:, None], t), -12 * s, 12 * s)
        return lambda z: np.interp(ndtr(z[:, 0]), grid._cdf, grid.nodes)[:, None]


def oracle_transport(problem: ThermoProblem, h: float = 1e-6) -> FunctionField:
    """Exact escort v* for Gaussian p*_t (linear or quadratic reward).

    With p*_t = N(m_t, S_t) and reference drift κx + (σ²/2+η)(𝔰+∇r_t), the
    affine field v(x) = G(x − m) + ṁ − κm with
    G = (Ṡ − 2κS + 2ηI)S⁻¹/2 keeps every marginal equal to p*_t.
    """
    if not problem.closed_form():
        raise CapabilityError("oracle transport needs a closed-form tilt")
    if problem.path.reward.is_zero:
        return zero_field(problem.dim)

    def parts(t):
        lo, hi = max(t - h, 1e-9), min(t + h, 1 - 1e-9)
        p, pl, ph = problem.target(t), problem.target(lo), problem.target(hi)
        m_dot = (ph.mean - pl.mean) / (hi - lo)
        s_dot = (ph.cov - pl.cov) / (hi - lo)
        c = coefficients(problem.sched, t)
        d = problem.dim
        G = 0.5 * (s_dot - 2 * c.kappa * p.cov + 2 * c.eta * np.eye(d)) @ np.linalg.inv(p.cov)
        return p.mean, G, m_dot - c.kappa * p.mean

    def fn(x, t):
        m, G, shift = parts(float(t))
        return (x - m) @ G.T + shift

    def div(x, t):
        return np.full(x.shape[0], np.trace(parts(float(t))[1]))

    return FunctionField(fn, div, problem.dim, "oracle_transport")


# ---------------------------------------------------------------------------
# simulation


def forward_paths(problem: ThermoProblem, v: VectorField, n_paths: int, steps: int = 200,
                  seed: int = 0, stream: int = 0) -> PathBundle:
    grid = time_grid(problem.sched, steps)
    drift = problem.drift(v, forward=True)
    noise = problem.sigma
    traj = simulate(drift, noise, problem.sampler(grid[0]), grid, seed, n_paths,
                    problem.dim, stream)
    return to_bundle(traj, problem.drift(v, forward=False), noise)


def backward_paths(problem: ThermoProblem, v: VectorField, n_paths: int, steps: int = 200,
                   seed: int = 0, stream: int = 1) -> PathBundle:
    grid = time_grid(problem.sched, steps)
    return simulate_backward(problem.drift(v, forward=False), problem.sigma,
                             problem.sampler(grid[-1]), grid, seed, n_paths, problem.dim, stream)


# ---------------------------------------------------------------------------
# work functional and the divergence-form log-RND

TERMS = ("drift_score", "transport", "time_derivative", "quadratic", "laplacian", "divergence")


def _divergence(v: VectorField, x, t):
    try:
        return v.divergence(x, t)
    except (NotImplementedError, ModelError) as exc:
        raise CapabilityError("the transport field has no divergence") from exc


def work_terms(problem: ThermoProblem, v: VectorField, x, t) -> dict:
    """Per-row integrand pieces of the generalized work at time t."""
    c = coefficients(problem.sched, t)
    s = problem.score(x, t)
    g = problem.path.grad(x, t)
    vx = v.eval(x, t)
    return {
        "drift_score": np.sum((c.kappa * x + 2 * c.eta * s) * g, axis=1),
        "transport": np.sum(vx * (s + g), axis=1),
        "time_derivative": problem.path.time_derivative(x, t),
        "quadratic": c.eta * np.sum(g * g, axis=1),
        "laplacian": c.eta * problem.path.laplacian(x, t),
        "divergence": _divergence(v, x, t),
    }


def work_integrand(problem: ThermoProblem, v: VectorField, x, t) -> np.ndarray:
    return sum(work_terms(problem, v, x, t).values())


@dataclass(frozen=True)
class LogRndSample:
    value: np.ndarray                 # (n,)
    breakdown: dict                   # name -> (n,)

    def check(self, tol: float = 1e-12) -> float:
        total = sum(self.breakdown.values())
        return float(np.max(np.abs(total - self.value)))


def work(problem: ThermoProblem, v: VectorField, states: np.ndarray, grid: np.ndarray,
         rule: str = "trapezoid") -> dict:
    """Time integrals of each work term, per path.

    ``rule`` is "trapezoid" (default, second order in Δt) or "left"
    (left-endpoint Riemann sum).
    """
    if rule not in ("trapezoid", "left"):
        raise ValueError(f"unknown quadrature rule {rule!r}")
    n = states.shape[0]
    acc = {k: np.zeros(n) for k in TERMS}
    prev = work_terms(problem, v, states[:, 0], grid[0])
    for k in range(grid.size - 1):
        dt = grid[k + 1] - grid[k]
        if rule == "left":
            for name, val in prev.items():
                acc[name] += dt * val
            if k + 1 < grid.size - 1:
                prev = work_terms(problem, v, states[:, k + 1], grid[k + 1])
            continue
        nxt = work_terms(problem, v, states[:, k + 1], grid[k + 1])
        for name in TERMS:
            acc[name] += 0.5 * dt * (prev[name] + nxt[name])
        prev = nxt
    return acc


def crooks_log_rnd(problem: ThermoProblem, v: VectorField, bundle: PathBundle,
                   delta_f: float | None = None, rule: str = "trapezoid") -> LogRndSample:
    """log dP→/dP← = ΔF − W along each path."""
    grid = bundle.grid
    if delta_f is None:
        delta_f = problem.free_energy(grid[-1]) - problem.free_energy(grid[0])
    terms = work(problem, v, bundle.states, grid, rule)
    breakdown = {"boundary": np.full(bundle.n_paths, float(delta_f))}
    breakdown.update({k: -val for k, val in terms.items()})
    return LogRndSample(sum(breakdown.values()), breakdown)


class Estimator(str, Enum):
    JARZYNSKI = "Jarzynski"
    DIRECT = "DirectOracle"


@dataclass(frozen=True)
class FreeEnergyEstimate:
    log_ratio_estimate: float
    std_err: float
    n_paths: int
    estimator: str
    ess: float = float("nan")
    steps: int = 0
    v_tag: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def low_ess(self) -> bool:
        return self.ess < 10

    def to_json(self) -> str:
        d = {"method": self.estimator, "v_tag": self.v_tag, "n_paths": self.n_paths,
             "K": self.steps, "estimate": self.log_ratio_estimate, "std_err": self.std_err,
             "ess": self.ess, **self.extra}
        return json.dumps({k: None if isinstance(v, float) and not math.isfinite(v) else v
                           for k, v in d.items()})


def log_mean_exp(values: np.ndarray) -> float:
    return float(logsumexp(values) - np.log(values.size))


def jackknife_lme(values: np.ndarray):
    """Log-mean-exp with its leave-one-out jackknife standard error."""
    n = values.size
    full = log_mean_exp(values)
    if n < 2:
        return full, float("nan")
    shift = values.max()
    w = np.exp(values - shift)
    total = w.sum()
    loo = np.log((total - w) / (n - 1)) + shift
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return full, float(se)


def effective_sample_size(logw: np.ndarray) -> float:
    w = np.exp(logw - logw.max())
    return float(w.sum() ** 2 / np.sum(w * w))


def jarzynski_free_energy(problem: ThermoProblem, v: VectorField, bundle: PathBundle,
                          v_tag: str = "", rule: str = "trapezoid") -> FreeEnergyEstimate:
    """log E[e^W] over forward paths, the escorted Jarzynski estimate of ΔF."""
    W = sum(work(problem, v, bundle.states, bundle.grid, rule).values())
    est, se = jackknife_lme(W)
    return FreeEnergyEstimate(est, se, bundle.n_paths, Estimator.JARZYNSKI.value,
                              effective_sample_size(W), bundle.steps, v_tag,
                              {"work_mean": float(W.mean()), "work_var": float(W.var(ddof=1))})


def direct_free_energy(problem: ThermoProblem) -> FreeEnergyEstimate:
    s = problem.sched
    val = problem.free_energy(s.t_max) - problem.free_energy(s.t_min)
    return FreeEnergyEstimate(val, 0.0, 0, Estimator.DIRECT.value)


# ---------------------------------------------------------------------------
# NETS


@dataclass
class PolyFreeEnergy:
    """F(t) = Σ_j a_j t^j for j = 1..degree, so F(0) = 0."""

    coef: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def degree(self) -> int:
        return self.coef.size

    def value(self, t):
        t = np.asarray(t, dtype=float)
        return sum(a * t ** (j + 1) for j, a in enumerate(self.coef))

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        return sum((j + 1) * a * t**j for j, a in enumerate(self.coef))

    def derivative_basis(self, t):
        """∂Ḟ/∂a_j, shape (n, degree)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([(j + 1) * t**j for j in range(self.degree)], axis=1)


def nets_residual(problem: ThermoProblem, v: VectorField, f_dot, x, t) -> np.ndarray:
    """Work integrand minus ∂_tF_t at (x, t)."""
    fd = f_dot(t) if callable(f_dot) else f_dot
    return work_integrand(problem, v, np.atleast_2d(x), t) - fd


def nets_loss(problem: ThermoProblem, v: VectorField, F: PolyFreeEnergy, states: np.ndarray,
              grid: np.ndarray):
    """Mean squared residual over probe states (n, K+1, d) at the grid's left points.

    Returns (loss, std_err); the per-path time average is the unit of
    independence.
    """
    n = states.shape[0]
    acc = np.zeros(n)
    span = grid[-1] - grid[0]
    for k in range(grid.size - 1):
        dt = grid[k + 1] - grid[k]
        res = nets_residual(problem, v, F.derivative, states[:, k], grid[k])
        acc += dt * res**2
    acc /= span
    return float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def nets_loss_grad(problem: ThermoProblem, v: VectorField, F: PolyFreeEnergy,
                   states: np.ndarray, grid: np.ndarray):
    """Loss and gradients with respect to v's parameters and F's coefficients."""
    n = states.shape[0]
    span = grid[-1] - grid[0]
    gv = np.zeros(v.n_params)
    gF = np.zeros(F.degree)
    total = 0.0
    for k in range(grid.size - 1):
        dt = grid[k + 1] - grid[k]
        x, t = states[:, k], grid[k]
        res = nets_residual(problem, v, F.derivative, x, t)
        w = 2 * dt * res / (n * span)
        total += dt * np.sum(res**2) / (n * span)
        s_plus = problem.score(x, t) + problem.path.grad(x, t)
        gv += v.vjp_params(x, t, w[:, None] * s_plus)
        gv += v.divergence_vjp_params(x, t, w)
        gF -= w @ F.derivative_basis(np.full(n, t))
    return total, gv, gF


# ---------------------------------------------------------------------------
# CMCD


def cmcd_log_rnd(problem: ThermoProblem, v: VectorField, states: np.ndarray, grid: np.ndarray,
                 constants: bool = True, return_grads: bool = False):
    """Path-valid log dP→/dP← written against the base reference pair.

    With a = γ⁺ + w⁺ and b = γ⁻ + w⁻ (γ± the base forward/backward drifts):

        r(t_min, Y_0) − r(t_max, Y_K)
        + Σ σ_k⁻²⟨w⁺_k, ΔY_k − ½(a_k + γ⁺_k)Δt⟩                (left points)
        − Σ σ_{k+1}⁻²⟨w⁻_{k+1}, ΔY_k − ½(b_{k+1} + γ⁻_{k+1})Δt⟩  (right points)

    plus F(t_max) − F(t_min) when ``constants``.  With ``return_grads`` also
    returns the sensitivities ∂/∂v at left and right points, each (n, K, d).
    """
    n, K1, d = states.shape
    K = K1 - 1
    gp, gm = problem.reference_drift(True), problem.reference_drift(False)
    a, b = problem.drift(v, True), problem.drift(v, False)
    out = problem.path.value(states[:, 0], grid[0]) - problem.path.value(states[:, -1], grid[-1])
    if constants:
        out = out + problem.free_energy(grid[-1]) - problem.free_energy(grid[0])
    g_left = np.zeros((n, K, d))
    g_right = np.zeros((n, K, d))
    for k in range(K):
        dt = grid[k + 1] - grid[k]
        dy = states[:, k + 1] - states[:, k]
        xl, tl = states[:, k], grid[k]
        xr, tr = states[:, k + 1], grid[k + 1]
        sl2, sr2 = problem.sigma(tl) ** 2, problem.sigma(tr) ** 2
        al, gl = a(xl, tl), gp(xl, tl)
        br, gr = b(xr, tr), gm(xr, tr)
        out = out + np.sum((al - gl) * (dy - 0.5 * (al + gl) * dt), axis=1) / sl2
        out = out - np.sum((br - gr) * (dy - 0.5 * (br + gr) * dt), axis=1) / sr2
        if return_grads:
            g_left[:, k] = (dy - al * dt) / sl2
            g_right[:, k] = -(dy - br * dt) / sr2
    if return_grads:
        return out, g_left, g_right
    return out


def _mean_se(x: np.ndarray):
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")


def cmcd_kl_loss(problem: ThermoProblem, v: VectorField, bundle: PathBundle,
                 constants: bool = True):
    """Mean log-RND over forward paths simulated under v: (estimate, std_err)."""
    return _mean_se(cmcd_log_rnd(problem, v, bundle.states, bundle.grid, constants))


def cmcd_logvar_loss(problem: ThermoProblem, v: VectorField, bundle: PathBundle):
    """Variance of the log-RND over paths from any reference process: (estimate, std_err)."""
    if bundle.n_paths < 2:
        raise ValueError("log-variance loss needs at least 2 paths")
    L = cmcd_log_rnd(problem, v, bundle.states, bundle.grid, constants=False)
    n = L.size
    c = L - L.mean()
    var = float(np.sum(c**2) / (n - 1))
    m4 = float(np.mean(c**4))
    se = float(np.sqrt(max(m4 - var**2, 0.0) / n))
    return var, se


def _field_grad(v: VectorField, states, grid, up_left, up_right) -> np.ndarray:
    g = np.zeros(v.n_params)
    for k in range(grid.size - 1):
        g += v.vjp_params(states[:, k], grid[k], up_left[:, k])
        g += v.vjp_params(states[:, k + 1], grid[k + 1], up_right[:, k])
    return g


def cmcd_logvar_grad(problem: ThermoProblem, v: VectorField, bundle: PathBundle):
    """Variance of the log-RND and its gradient with paths held fixed."""
    L, gl, gr = cmcd_log_rnd(problem, v, bundle.states, bundle.grid, False, True)
    n = L.size
    coef = (2.0 * (L - L.mean()) / (n - 1))[:, None, None]
    return float(L.var(ddof=1)), _field_grad(v, bundle.states, bundle.grid, coef * gl, coef * gr)


def cmcd_kl_grad(problem: ThermoProblem, v: VectorField, bundle: PathBundle):
    """Mean log-RND and a score-function gradient for on-policy paths.

    The path density under v contributes Σ⟨∂a/∂θ, ΔY − aΔt⟩/σ², whose
    sensitivity coincides with the left-point term of the explicit gradient;
    a leave-one-out baseline keeps the estimate unbiased.
    """
    L, gl, gr = cmcd_log_rnd(problem, v, bundle.states, bundle.grid, False, True)
    n = L.size
    base = (L.sum() - L) / (n - 1)
    w = ((L - base) / n)[:, None, None]
    up_left = gl / n + w * gl
    return float(L.mean()), _field_grad(v, bundle.states, bundle.grid, up_left, gr / n)


# ---------------------------------------------------------------------------
# Nelson consistency


def nelson_check(problem: ThermoProblem, v: VectorField, t_probe=(0.25, 0.5, 0.75),
                 n_paths: int = 4000, steps: int = 200, seed: int = 0, z_max: float = 3.0):
    """Compare forward and backward marginal moments at probe times."""
    fwd = forward_paths(problem, v, n_paths, steps, seed, stream=11)
    bwd = backward_paths(problem, v, n_paths, steps, seed, stream=12)
    out = []
    for tp in t_probe:
        k = int(np.argmin(np.abs(fwd.grid - tp)))
        a, b = fwd.states[:, k], bwd.states[:, k]
        mean_gap = a.mean(0) - b.mean(0)
        mean_se = np.sqrt(a.var(0, ddof=1) / a.shape[0] + b.var(0, ddof=1) / b.shape[0])
        va, vb = a.var(0, ddof=1), b.var(0, ddof=1)

        def var_se(x, var):
            c = x - x.mean(0)
            return np.sqrt(np.maximum(np.mean(c**4, axis=0) - var**2, 0.0) / x.shape[0])

        vse = np.sqrt(var_se(a, va) ** 2 + var_se(b, vb) ** 2)
        mz = float(np.max(np.abs(mean_gap) / mean_se))
        vz = float(np.max(np.abs(va - vb) / vse))
        out.append({"t": float(fwd.grid[k]), "mean_gap": mean_gap.tolist(),
                    "mean_se": mean_se.tolist(), "var_gap": (va - vb).tolist(),
                    "var_se": vse.tolist(), "mean_z": mz, "var_z": vz,
                    "passes": bool(mz <= z_max and vz <= z_max)})
    return out
