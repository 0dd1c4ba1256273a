"""Regression targets for reward fine-tuning and their variance analysis.

Every method here produces a ``TargetSample`` batch.  Each row carries a
control target ``u_target`` (fit with unit weight) and the equivalent
drift-space target ``xi`` (fit with weight 1/(2η_t)); the two are tied by
ξ = v_base + σ(t)·u_target with σ(t) = √(2η_t), so

    ‖u − u_target‖² = ‖v_ft − ξ‖² / (2η_t),   v_ft = v_base + σ(t)u.

``measure`` turns sample means into time integrals: the loss estimate is
mean(measure · ‖u − u_target‖²), averaged over independent ``group`` ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .dynamics import AdjointPath, Field, Trajectory
from .model import VectorField
from .oracle import GaussianBase, RewardSpec
from .quadrature import integral
from .schedule import Family, ScheduleSpec, as_column, coefficients, exp_int_chi


class UnsupportedError(ValueError):
    """Raised when a method's preconditions (base family, available scores) fail."""


class GridMismatchError(ValueError):
    pass


class Method(str, Enum):
    AMAS = "AMAS"
    TSM = "TSM"
    CSM = "CSM"
    NSM = "NSM"
    IDEM = "iDEM"


@dataclass(frozen=True)
class TargetSample:
    """A batch of n regression targets (arrays are row-aligned)."""

    t: np.ndarray          # (n,)
    x_t: np.ndarray        # (n, d)
    xi: np.ndarray         # (n, d)
    weight: np.ndarray     # (n,) 1/(2η_t)
    u_target: np.ndarray   # (n, d)
    v_base: np.ndarray     # (n, d)
    measure: np.ndarray    # (n,)
    group: np.ndarray      # (n,) ids of independent draws

    def __len__(self) -> int:
        return self.t.size

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 / self.weight)

    def unified_residual(self, v_ft: np.ndarray) -> np.ndarray:
        """‖v_ft − ξ‖²/(2η_t) per row."""
        return np.sum((v_ft - self.xi) ** 2, axis=1) * self.weight

    def control_residual(self, u: np.ndarray) -> np.ndarray:
        return np.sum((u - self.u_target) ** 2, axis=1)


def _build(t, x, u_target, v_base, measure, group, sched) -> TargetSample:
    t = np.asarray(t, dtype=float)
    eta = np.asarray(coefficients(sched, t).eta, dtype=float)
    sig = as_column(np.sqrt(2.0 * eta))
    xi = v_base + sig * u_target
    if not np.all(np.isfinite(xi)):
        raise FloatingPointError("non-finite regression target")
    return TargetSample(t, x, xi, 1.0 / (2.0 * eta), u_target, v_base,
                        np.broadcast_to(np.asarray(measure, dtype=float), t.shape).copy(),
                        np.asarray(group))


def time_blocks(t: np.ndarray):
    """Yield (time, row indices) for each distinct time, in sorted order."""
    order = np.argsort(t, kind="stable")
    ts = t[order]
    cuts = np.flatnonzero(np.diff(ts)) + 1
    for rows in np.split(order, cuts):
        yield float(t[rows[0]]), rows


def _base_values(base_drift: Field | None, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    if base_drift is None:
        return np.zeros_like(x)
    out = np.empty_like(x)
    for tv, rows in time_blocks(t):
        out[rows] = base_drift(x[rows], tv)
    return out


# ---------------------------------------------------------------------------
# SOC targets


def am_targets(traj: Trajectory, adj: AdjointPath, sched: ScheduleSpec,
               base_drift: Field | None = None) -> TargetSample:
    """Adjoint Matching targets −σ(t_k)ã(t_k) at the left grid points of each path."""
    if adj.grid.shape != traj.grid.shape or not np.allclose(adj.grid, traj.grid):
        raise GridMismatchError("adjoint and trajectory grids differ")
    n, K1, d = traj.states.shape
    K = K1 - 1
    t = np.tile(traj.grid[:-1], n)
    x = traj.states[:, :-1].reshape(n * K, d)
    sig = np.sqrt(2.0 * np.asarray(coefficients(sched, traj.grid[:-1]).eta))
    u_target = (-sig[None, :, None] * adj.states[:, :-1]).reshape(n * K, d)
    measure = np.tile(K * traj.dt, n)
    group = np.repeat(np.arange(n), K)
    return _build(t, x, u_target, _base_values(base_drift, x, t), measure, group, sched)


def as_targets(terminal_x1: np.ndarray, reward: RewardSpec, sched: ScheduleSpec, base,
               n_noisings: int, rng: np.random.Generator,
               base_drift: Field | None = None) -> TargetSample:
    """Adjoint Sampling targets exp(∫_t^1 χ)·σ(t)·∇r(X₁) at X̄_t = α_t X₁ + β_t ε."""
    if not isinstance(base, GaussianBase):
        raise UnsupportedError("adjoint sampling needs a Gaussian base (linear reference drift)")
    if n_noisings < 1:
        raise ValueError("n_noisings must be at least 1")
    x1 = np.atleast_2d(np.asarray(terminal_x1, dtype=float))
    n, d = x1.shape
    y = np.repeat(x1, n_noisings, axis=0)
    t = rng.uniform(sched.t_min, sched.t_max, size=y.shape[0])
    eps = rng.standard_normal(y.shape)
    c = coefficients(sched, t)
    x = as_column(c.alpha) * y + as_column(c.beta) * eps
    factor = exp_int_chi(sched, base.sigma1, t) * c.sigma_mem
    u_target = as_column(factor) * reward.grad(y)
    measure = sched.t_max - sched.t_min
    group = np.repeat(np.arange(n), n_noisings)
    return _build(t, x, u_target, _base_values(base_drift, x, t), measure, group, sched)


# ---------------------------------------------------------------------------
# score-matching targets


def score_targets(method: Method | str, y, eps, t, sched: ScheduleSpec,
                  score_fn: Callable | None = None, data_logpdf: Callable | None = None,
                  idem_n: int = 128, rng: np.random.Generator | None = None):
    """ŝ-regression targets at X̄_t = α_t y + β_t ε.

    ``score_fn`` is ∇log p_base + ∇r; ``data_logpdf`` is the unnormalized
    log-density used by the self-normalized iDEM estimator.
    Returns (x_t, ŝ).
    """
    method = Method(method)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (y.shape[0],))
    c = coefficients(sched, t)
    al, be = as_column(c.alpha), as_column(c.beta)
    x = al * y + be * eps
    if method is Method.CSM:
        return x, -(x - al * y) / be**2
    if method is Method.AMAS:
        raise UnsupportedError("use am_targets or as_targets for the SOC losses")
    if score_fn is None:
        raise UnsupportedError(f"{method.value} needs the target score")
    if method is Method.TSM:
        return x, score_fn(y) / al
    if method is Method.NSM:
        return x, (al * score_fn(y) - (x - al * y)) / (al**2 + be**2)
    if data_logpdf is None:
        raise UnsupportedError("iDEM needs the target log-density")
    if idem_n < 1:
        raise ValueError("idem_n must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        cand = (x[i] - c.beta[i] * rng.standard_normal((idem_n, d))) / c.alpha[i]
        logw = data_logpdf(cand)
        w = np.exp(logw - logsumexp(logw))
        out[i] = w @ score_fn(cand) / c.alpha[i]
    return x, out


def sm_targets(method: Method | str, y, eps, t, sched: ScheduleSpec,
               score_fn: Callable | None = None, base_score: Field | None = None,
               data_logpdf: Callable | None = None, idem_n: int = 128,
               rng: np.random.Generator | None = None) -> TargetSample:
    """Score-matching targets in unified form ξ = κ_t X̄_t + 2η_t ŝ.

    With a base score 𝔰 the reference drift is κx + 2η𝔰 and the control
    target becomes σ(t)(ŝ − 𝔰).  Without one the reference drift is κx.
    """
    x, s_hat = score_targets(method, y, eps, t, sched, score_fn, data_logpdf, idem_n, rng)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    c = coefficients(sched, t)
    s_base = _base_values(base_score, x, t)
    v_base = as_column(c.kappa) * x + as_column(2 * c.eta) * s_base
    u_target = as_column(c.sigma_mem) * (s_hat - s_base)
    measure = sched.t_max - sched.t_min
    return _build(t, x, u_target, v_base, measure, np.arange(x.shape[0]), sched)


# ---------------------------------------------------------------------------
# regression loss and gradient


def regression_loss_grad(field_: VectorField, samples: TargetSample,
                         targets: np.ndarray | None = None):
    """Loss mean(measure·‖u − target‖²) and its parameter gradient.

    ``targets`` overrides ``samples.u_target`` (e.g. with conditional means).
    """
    target = samples.u_target if targets is None else targets
    u = np.empty_like(target)
    grad = np.zeros(field_.n_params)
    n = len(samples)
    for tv, rows in time_blocks(samples.t):
        u[rows] = field_.eval(samples.x_t[rows], tv)
        up = 2.0 * samples.measure[rows, None] * (u[rows] - target[rows]) / n
        grad += field_.vjp_params(samples.x_t[rows], tv, up)
    loss = float(np.mean(samples.measure * np.sum((u - target) ** 2, axis=1)))
    return loss, grad


def per_group_gradients(field_: VectorField, samples: TargetSample,
                        targets: np.ndarray | None = None) -> np.ndarray:
    """Per-group gradient contributions (rows sum to n_groups times the batch gradient)."""
    target = samples.u_target if targets is None else targets
    groups, inverse = np.unique(samples.group, return_inverse=True)
    per_group = len(samples) / groups.size
    out = np.zeros((groups.size, field_.n_params))
    for i in range(len(samples)):
        x = samples.x_t[i:i + 1]
        u = field_.eval(x, samples.t[i])
        up = 2.0 * samples.measure[i] * (u - target[i:i + 1]) / per_group
        out[inverse[i]] += field_.vjp_params(x, samples.t[i], up)
    return out


# ---------------------------------------------------------------------------
# bias–variance split


@dataclass(frozen=True)
class BiasVarianceReport:
    bias_est: float
    variance_est: float
    total: float
    n_samples: int
    std_errs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"kind": "bias_variance", **asdict(self)})


def _grouped_mean(values: np.ndarray, samples: TargetSample):
    groups, inverse = np.unique(samples.group, return_inverse=True)
    sums = np.bincount(inverse, weights=values, minlength=groups.size)
    per = np.bincount(inverse, minlength=groups.size)
    g = sums / per
    se = float(g.std(ddof=1) / np.sqrt(g.size)) if g.size > 1 else float("nan")
    return float(g.mean()), se


def bias_variance_split(samples: TargetSample, cond_mean: Callable,
                        v_ft: Callable | None = None) -> BiasVarianceReport:
    """Split the unified loss into bias and variance parts.

    ``cond_mean(t, x)`` returns E[ξ | X_t = x] for rows sharing time t;
    ``v_ft(x, t)`` is the fine-tuned drift (omitted: the bias term is not
    evaluated and ``total`` equals the variance term).
    """
    m = np.empty_like(samples.xi)
    v = np.empty_like(samples.xi) if v_ft is not None else None
    for tv, rows in time_blocks(samples.t):
        m[rows] = cond_mean(tv, samples.x_t[rows])
        if v is not None:
            v[rows] = v_ft(samples.x_t[rows], tv)
    var_vals = samples.measure * np.sum((samples.xi - m) ** 2, axis=1) * samples.weight
    variance, var_se = _grouped_mean(var_vals, samples)
    if v is None:
        return BiasVarianceReport(0.0, variance, variance, len(samples),
                                  {"bias": 0.0, "variance": var_se, "total": var_se})
    bias_vals = samples.measure * np.sum((v - m) ** 2, axis=1) * samples.weight
    tot_vals = samples.measure * np.sum((v - samples.xi) ** 2, axis=1) * samples.weight
    bias, bias_se = _grouped_mean(bias_vals, samples)
    total, tot_se = _grouped_mean(tot_vals, samples)
    return BiasVarianceReport(bias, variance, total, len(samples),
                              {"bias": bias_se, "variance": var_se, "total": tot_se})


# ---------------------------------------------------------------------------
# variance-term coefficients


MOMENTS = {
    Method.AMAS: "E‖∇r(Y)‖²",
    Method.TSM: "E‖∇log p_base(Y) + ∇r(Y)‖²",
    Method.CSM: "d (noise dimension)",
    Method.NSM: "E‖∇log p_base(Y) + ∇r(Y) + Y‖²",
    Method.IDEM: "E‖∇log p_base(Y) + ∇r(Y)‖²",
}


@dataclass(frozen=True)
class VarianceBoundReport:
    method: str
    family: str
    sigma0: float
    sigma1: float
    coefficient: float | None
    infinite: bool
    bound: float | None
    moment_factor: str

    def to_json(self) -> str:
        return json.dumps({"kind": "variance_bound", **asdict(self)})


def variance_integrand(method: Method | str, sched: ScheduleSpec,
                       sigma1: float = 1.0) -> Callable[[float], float]:
    """Time density whose integral over (0,1) is the method's coefficient."""
    method = Method(method)

    def f(t):
        c = coefficients(sched, t)
        if method is Method.AMAS:
            return float(c.eta * exp_int_chi(sched, sigma1, t) ** 2)
        if method is Method.NSM:
            return float(c.eta * c.alpha**2 / (c.alpha**2 + c.beta**2))
        if method in (Method.TSM, Method.IDEM):
            return float(c.eta / c.alpha**2)
        return float(c.eta / c.beta**4)

    return f


def _nsm_closed_form(family: Family, sigma0: float) -> float:
    a = sigma0**2
    if family is Family.FOLLMER:
        if abs(a - 1.0) < 1e-6:
            return 0.25
        return a / (2 * (1 - a)) + a**2 * math.log(a) / (2 * (1 - a) ** 2)
    if family is Family.DDIM:
        if abs(a - 1.0) < 1e-6:
            return 0.5
        return -a * math.log(a) / (2 * (1 - a))
    c = sigma0
    q = 1 + c**2
    if abs(c - 1.0) < 1e-6:
        return (math.pi - 2) / 4
    return c**2 * (-1 / q - (1 - c**2) * math.log(c**2) / (2 * q**2) + math.pi * c / q**2)


def table1_coefficient(method: Method | str, family: Family | str, sigma0: float = 1.0,
                       sigma1: float = 1.0) -> float:
    """Closed-form time integral of the variance density; +inf when it diverges."""
    method, family = Method(method), Family(family)
    if method is Method.AMAS:
        return sigma1**2 / 2
    if method is Method.NSM:
        return _nsm_closed_form(family, sigma0)
    return math.inf


def table1_bound(method: Method | str, family: Family | str, sigma0: float = 1.0,
                 sigma1: float = 1.0, moment: float = 1.0) -> VarianceBoundReport:
    method, family = Method(method), Family(family)
    coef = table1_coefficient(method, family, sigma0, sigma1)
    infinite = math.isinf(coef)
    return VarianceBoundReport(
        method=method.value, family=family.value, sigma0=float(sigma0), sigma1=float(sigma1),
        coefficient=None if infinite else coef, infinite=infinite,
        bound=None if infinite else coef * moment, moment_factor=MOMENTS[method])


def table1_numeric(method: Method | str, sched: ScheduleSpec, sigma1: float = 1.0) -> float:
    """Quadrature of the variance density over (0, 1)."""
    f = variance_integrand(method, sched, sigma1)
    return integral(f, 0.0, 0.5) + integral(f, 0.5, 1.0)


def divergence_witness(method: Method | str, sched: ScheduleSpec, eps: float,
                       sigma1: float = 1.0) -> dict:
    """Partial integral from ε and the growth rates of the density at ε.

    For a density behaving like C/t² near zero the partial integral grows
    like C/ε, so ``growth`` approaches C as ε shrinks. ``log_growth`` is
    ε·(density at ε); a positive limit already rules out integrability and
    covers the logarithmic blow-up of CSM under DDIM and RF.
    """
    f = variance_integrand(method, sched, sigma1)
    upper = 0.5 if Method(method) is Method.CSM else 1.0 - 1e-12
    partial = integral(f, eps, upper)
    return {"eps": eps, "partial": partial, "growth": eps**2 * f(eps),
            "log_growth": eps * f(eps), "scaled_partial": eps * partial}


# ---------------------------------------------------------------------------
# control cost


def control_cost(u_field: Callable, traj: Trajectory, reward: RewardSpec):
    """Monte Carlo estimate of E[½∫‖u‖²dt − r(X₁)] with its standard error."""
    n, K1, _ = traj.states.shape
    running = np.zeros(n)
    for k in range(K1 - 1):
        u = u_field(traj.states[:, k], traj.grid[k])
        running += 0.5 * np.sum(u**2, axis=1) * (traj.grid[k + 1] - traj.grid[k])
    vals = running - reward.value(traj.terminal)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def write_jsonl(records, path) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write((r.to_json() if hasattr(r, "to_json") else json.dumps(r)) + "\n")
