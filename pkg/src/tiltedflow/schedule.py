"""Flow-matching coefficient schedules.

Three families are supported, each built from a monotone progress map ᾱ_t
and an initial noise scale σ₀:

    Föllmer         α = ᾱ,   β = σ₀ √(ᾱ(1−ᾱ))
    DDIM            α = √ᾱ,  β = σ₀ √(1−ᾱ)
    Rectified Flow  α = ᾱ,   β = σ₀ (1−ᾱ)

From (α, β) follow κ = α̇/α, η = β(κβ − β̇) and the memoryless noise
σ(t) = √(2η).  All functions accept scalars or numpy arrays for t.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

ArrayLike = float | np.ndarray


class ScheduleError(ValueError):
    """Raised for out-of-domain times or unsupported families."""


class Family(str, Enum):
    FOLLMER = "follmer"
    DDIM = "ddim"
    RECTIFIED_FLOW = "rectified_flow"


def _identity(t):
    return t


def _one(t):
    return np.ones_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class Progress:
    """Monotone map ᾱ: [0,1] -> [0,1] with its derivative and optional inverse."""

    value: Callable = _identity
    deriv: Callable = _one
    inverse: Callable | None = _identity
    name: str = "identity"


IDENTITY = Progress()


@dataclass(frozen=True)
class ScheduleSpec:
    family: Family = Family.FOLLMER
    sigma0: float = 1.0
    progress: Progress = field(default=IDENTITY)
    t_min: float = 1e-3
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not self.sigma0 > 0:
            raise ScheduleError("sigma0 must be positive")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ScheduleError("need 0 < t_min < t_max < 1")


@dataclass(frozen=True)
class CoefficientSample:
    t: ArrayLike
    alpha: ArrayLike
    beta: ArrayLike
    alpha_dot: ArrayLike
    beta_dot: ArrayLike
    kappa: ArrayLike
    eta: ArrayLike
    sigma_mem: ArrayLike


@dataclass(frozen=True)
class ScaleTimeMap:
    t_of_r: Callable[[ArrayLike], ArrayLike]
    s_of_r: Callable[[ArrayLike], ArrayLike]


def as_column(a):
    """Reshape per-sample coefficients of shape (n,) to broadcast against (n, d)."""
    a = np.asarray(a, dtype=float)
    return a[..., None] if a.ndim >= 1 else a


def _check_open(t, lo_closed=False, hi_closed=False):
    arr = np.asarray(t, dtype=float)
    lo_ok = arr >= 0.0 if lo_closed else arr > 0.0
    hi_ok = arr <= 1.0 if hi_closed else arr < 1.0
    if not np.all(lo_ok & hi_ok):
        raise ScheduleError(f"time outside the allowed interval: {t}")
    return arr


def _rates(spec: ScheduleSpec, t):
    """α, β, α̇, β̇ from the family's closed forms (no domain check)."""
    a = np.asarray(spec.progress.value(t), dtype=float)
    da = np.asarray(spec.progress.deriv(t), dtype=float)
    s0 = spec.sigma0
    if spec.family is Family.FOLLMER:
        root = np.sqrt(a * (1.0 - a))
        with np.errstate(divide="ignore", invalid="ignore"):
            beta_dot = s0 * (1.0 - 2.0 * a) * da / (2.0 * root)
        return a, s0 * root, da, beta_dot
    if spec.family is Family.DDIM:
        sa = np.sqrt(a)
        sb = np.sqrt(1.0 - a)
        with np.errstate(divide="ignore", invalid="ignore"):
            return sa, s0 * sb, da / (2.0 * sa), -s0 * da / (2.0 * sb)
    return a, s0 * (1.0 - a), da, -s0 * da


def _kappa_eta(spec: ScheduleSpec, t):
    """κ and η from the per-family closed forms."""
    a = np.asarray(spec.progress.value(t), dtype=float)
    da = np.asarray(spec.progress.deriv(t), dtype=float)
    s2 = spec.sigma0**2
    if spec.family is Family.FOLLMER:
        return da / a, 0.5 * da * s2
    if spec.family is Family.DDIM:
        return da / (2.0 * a), da * s2 / (2.0 * a)
    return da / a, (1.0 - a) * da * s2 / a


def eta_from_rates(alpha, beta, alpha_dot, beta_dot):
    """η = β(κβ − β̇) with κ = α̇/α."""
    kappa = alpha_dot / alpha
    return beta * (kappa * beta - beta_dot)


def coefficients(spec: ScheduleSpec, t: ArrayLike) -> CoefficientSample:
    t = _check_open(t)
    alpha, beta, alpha_dot, beta_dot = _rates(spec, t)
    kappa, eta = _kappa_eta(spec, t)
    return CoefficientSample(
        t=t, alpha=alpha, beta=beta, alpha_dot=alpha_dot, beta_dot=beta_dot,
        kappa=kappa, eta=eta, sigma_mem=np.sqrt(2.0 * np.maximum(eta, 0.0)),
    )


def alpha_beta(spec: ScheduleSpec, t: ArrayLike):
    """Interpolant coefficients, valid on the closed interval [0, 1]."""
    t = _check_open(t, lo_closed=True, hi_closed=True)
    alpha, beta, _, _ = _rates(spec, t)
    return alpha, beta


def kappa(spec: ScheduleSpec, t: ArrayLike):
    return _kappa_eta(spec, _check_open(t))[0]


def eta(spec: ScheduleSpec, t: ArrayLike):
    return _kappa_eta(spec, _check_open(t))[1]


def sigma_mem(spec: ScheduleSpec, t: ArrayLike):
    """Memoryless noise level √(2η_t)."""
    return np.sqrt(2.0 * eta(spec, t))


def marginal_var(spec: ScheduleSpec, sigma1: float, t: ArrayLike):
    """β_t² + α_t² σ₁², the variance of the reference marginal for a N(0, σ₁²) base."""
    alpha, beta = alpha_beta(spec, t)
    return beta**2 + alpha**2 * sigma1**2


def chi(spec: ScheduleSpec, sigma1: float, t: ArrayLike):
    """χ_t = κ_t − 2η_t / (β_t² + α_t² σ₁²)."""
    c = coefficients(spec, t)
    return c.kappa - 2.0 * c.eta / (c.beta**2 + c.alpha**2 * sigma1**2)


def exp_int_chi(spec: ScheduleSpec, sigma1: float, t: ArrayLike):
    """exp(∫_t^1 χ_s ds) in closed form."""
    t = _check_open(t, hi_closed=True)
    a = np.asarray(spec.progress.value(t), dtype=float)
    s0, s1 = spec.sigma0**2, sigma1**2
    if spec.family is Family.FOLLMER:
        return s1 / ((1.0 - a) * s0 + a * s1)
    if spec.family is Family.DDIM:
        return s1 * np.sqrt(a) / ((1.0 - a) * s0 + a * s1)
    # General σ₀, σ₁; reduces to ᾱ/((1−ᾱ)²+ᾱ²) when σ₀ = σ₁.
    return s1 * a / ((1.0 - a) ** 2 * s0 + a**2 * s1)


def progress_inverse(progress: Progress, y: ArrayLike, tol: float = 1e-12):
    """ᾱ⁻¹(y), closed form when available, otherwise bisection."""
    if progress.inverse is not None:
        return progress.inverse(y)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        below = np.asarray(progress.value(mid)) < y
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    return out if out.size > 1 else float(out[0])


def scale_time(spec: ScheduleSpec, sigma0_tilde: float) -> ScaleTimeMap:
    """Time change and spatial scale relating Rectified Flow at σ̃₀ to σ₀."""
    if spec.family is not Family.RECTIFIED_FLOW:
        raise ScheduleError("scale_time is only defined for rectified_flow")
    if not sigma0_tilde > 0:
        raise ScheduleError("sigma0_tilde must be positive")
    s0, st = spec.sigma0, sigma0_tilde

    def denom(r):
        a = np.asarray(spec.progress.value(r), dtype=float)
        return a, st * (1.0 - a) + s0 * a

    def t_of_r(r):
        a, d = denom(r)
        return progress_inverse(spec.progress, s0 * a / d)

    def s_of_r(r):
        return denom(r)[1] / s0

    return ScaleTimeMap(t_of_r=t_of_r, s_of_r=s_of_r)


def rescaled_drift(spec: ScheduleSpec, sigma0_tilde: float, gamma: float,
                   base_field: Callable) -> Callable:
    """Generative drift at initial scale σ̃₀ from a field trained at σ₀.

    ``base_field(x, t)`` is the probability-flow field κx + η𝔰 at σ₀.  The
    returned drift b̃(x, r) pairs with noise √(2γη̃_r) of the σ̃₀ schedule.
    """
    stm = scale_time(spec, sigma0_tilde)
    s0, st = spec.sigma0, sigma0_tilde

    def drift(x, r):
        x = np.asarray(x, dtype=float)
        r_arr = _check_open(r)
        a = np.asarray(spec.progress.value(r_arr), dtype=float)
        da = np.asarray(spec.progress.deriv(r_arr), dtype=float)
        t = stm.t_of_r(r_arr)
        da_t = np.asarray(spec.progress.deriv(t), dtype=float)
        d = st * (1.0 - a) + s0 * a
        gain = st * (1.0 + gamma) / d
        v = base_field(x / as_column(d / s0), t)
        return as_column(da / da_t * gain) * v + as_column(da / a * (1.0 - gain)) * x

    return drift


def rescaled_noise(spec: ScheduleSpec, sigma0_tilde: float, gamma: float) -> Callable:
    """Noise level √(2γη̃_r) matching ``rescaled_drift``."""
    tilde = ScheduleSpec(spec.family, sigma0_tilde, spec.progress, spec.t_min, spec.t_max)
    return lambda r: np.sqrt(2.0 * gamma * eta(tilde, r))


def time_grid(spec: ScheduleSpec, steps: int = 100, power: float = 1.0) -> np.ndarray:
    """Grid on [t_min, t_max]; ``power`` > 1 packs steps near t_min.

    Probability-flow drifts behave like x/(2t) near zero, so explicit Euler
    needs a graded grid there.
    """
    u = np.linspace(0.0, 1.0, steps + 1) ** power
    return spec.t_min + (spec.t_max - spec.t_min) * u
