"""Ground truth for tilted targets.

Closed forms cover a Gaussian base N(0, σ₁² I) tilted by linear or quadratic
rewards.  ``GridOracle1D`` handles arbitrary one-dimensional data densities by
quadrature of p_t(x) = ∫ N(x; α_t y, β_t²) p_data(y) dy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .schedule import ScheduleSpec, alpha_beta, as_column

GL_NODES = 41


class OracleError(ValueError):
    pass


class ExtrapolationError(OracleError):
    pass


class ResolutionError(OracleError):
    pass


class DegenerateTiltError(OracleError):
    pass


def fd_step(x: np.ndarray) -> np.ndarray:
    """Finite-difference step 1e-4·(1+‖x‖) per row."""
    x = np.atleast_2d(x)
    return 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))


@dataclass(frozen=True)
class GaussianBase:
    sigma1: float = 1.0
    dim: int = 1

    def logpdf(self, x):
        x = np.atleast_2d(x)
        s2 = self.sigma1**2
        return -0.5 * np.sum(x**2, axis=-1) / s2 - 0.5 * self.dim * np.log(2 * np.pi * s2)

    def score(self, x):
        return -np.asarray(x, dtype=float) / self.sigma1**2

    def sample(self, rng: np.random.Generator, n: int):
        return self.sigma1 * rng.standard_normal((n, self.dim))


class RewardKind(str, Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"
    CALLBACK = "callback"


@dataclass(frozen=True)
class RewardSpec:
    """Reward λ·r(x).

    Linear: r(x) = c·x.  Quadratic: r(x) = −½ xᵀAx + c·x.  Callback: user
    functions for value and gradient, with an optional Laplacian.
    """

    kind: RewardKind
    lam: float = 1.0
    c: np.ndarray | None = None
    A: np.ndarray | None = None
    value_fn: Callable | None = None
    grad_fn: Callable | None = None
    laplacian_fn: Callable | None = None

    @classmethod
    def linear(cls, c, lam: float = 1.0):
        return cls(RewardKind.LINEAR, lam, c=np.atleast_1d(np.asarray(c, dtype=float)))

    @classmethod
    def quadratic(cls, A, c=None, lam: float = 1.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if not np.allclose(A, A.T):
            raise OracleError("quadratic reward matrix must be symmetric")
        c = np.zeros(A.shape[0]) if c is None else np.atleast_1d(np.asarray(c, dtype=float))
        return cls(RewardKind.QUADRATIC, lam, c=c, A=A)

    @classmethod
    def callback(cls, value_fn, grad_fn, laplacian_fn=None, lam: float = 1.0):
        return cls(RewardKind.CALLBACK, lam, value_fn=value_fn, grad_fn=grad_fn,
                   laplacian_fn=laplacian_fn)

    @classmethod
    def zero(cls, dim: int = 1):
        return cls.linear(np.zeros(dim), 1.0)

    @property
    def is_zero(self) -> bool:
        return self.kind is RewardKind.LINEAR and not np.any(self.c)

    def value(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind is RewardKind.LINEAR:
            r = x @ self.c
        elif self.kind is RewardKind.QUADRATIC:
            r = -0.5 * np.einsum("ni,ij,nj->n", x, self.A, x) + x @ self.c
        else:
            r = np.asarray(self.value_fn(x), dtype=float)
        return self.lam * r

    def grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind is RewardKind.LINEAR:
            g = np.broadcast_to(self.c, x.shape).copy()
        elif self.kind is RewardKind.QUADRATIC:
            g = -x @ self.A + self.c
        else:
            g = np.asarray(self.grad_fn(x), dtype=float).reshape(x.shape)
        return self.lam * g

    def laplacian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        if self.kind is RewardKind.LINEAR:
            return np.zeros(n)
        if self.kind is RewardKind.QUADRATIC:
            return np.full(n, -self.lam * np.trace(self.A))
        if self.laplacian_fn is not None:
            return self.lam * np.asarray(self.laplacian_fn(x), dtype=float)
        h = fd_step(x)[:, None]
        total = np.zeros(n)
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            total += (self.grad(x + h * e)[:, i] - self.grad(x - h * e)[:, i]) / (2 * h[:, 0])
        return total


@dataclass(frozen=True)
class TiltedGaussian:
    mean: np.ndarray
    cov: np.ndarray
    log_normalizer: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int):
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T

    def score(self, y):
        return -(np.atleast_2d(y) - self.mean) @ np.linalg.inv(self.cov)

    def logpdf(self, y):
        y = np.atleast_2d(y)
        prec = np.linalg.inv(self.cov)
        diff = y - self.mean
        _, logdet = np.linalg.slogdet(2 * np.pi * self.cov)
        return -0.5 * np.einsum("ni,ij,nj->n", diff, prec, diff) - 0.5 * logdet

    def marginal(self, sched: ScheduleSpec, t: float) -> "TiltedGaussian":
        """Law of α_t Y + β_t ε for Y from this Gaussian."""
        alpha, beta = alpha_beta(sched, t)
        cov = alpha**2 * self.cov + beta**2 * np.eye(self.dim)
        return TiltedGaussian(alpha * self.mean, cov, 0.0)


def tilt_gaussian(base: GaussianBase, reward: RewardSpec) -> TiltedGaussian:
    """Mean, covariance and log E_base[e^r] of p_base·e^r for linear or quadratic r."""
    d = base.dim
    s2 = base.sigma1**2
    lam = reward.lam
    if reward.kind is RewardKind.LINEAR:
        lc = lam * reward.c
        return TiltedGaussian(s2 * lc, s2 * np.eye(d), 0.5 * s2 * float(lc @ lc))
    if reward.kind is RewardKind.QUADRATIC:
        prec = np.eye(d) / s2 + lam * reward.A
        if np.min(np.linalg.eigvalsh(prec)) <= 0:
            raise DegenerateTiltError("σ₁⁻² I + λA is not positive definite")
        cov = np.linalg.inv(prec)
        lc = lam * reward.c
        mean = cov @ lc
        _, logdet = np.linalg.slogdet(np.eye(d) + s2 * lam * reward.A)
        return TiltedGaussian(mean, cov, -0.5 * logdet + 0.5 * float(lc @ mean))
    raise OracleError("closed-form tilt needs a linear or quadratic reward")


def base_as_tilted(base: GaussianBase) -> TiltedGaussian:
    return TiltedGaussian(np.zeros(base.dim), base.sigma1**2 * np.eye(base.dim), 0.0)


def gaussian_score(base: GaussianBase, sched: ScheduleSpec, t, x):
    """Score of the reference marginal N(0, β_t² + α_t² σ₁²)."""
    alpha, beta = alpha_beta(sched, t)
    return -np.asarray(x, dtype=float) / as_column(beta**2 + alpha**2 * base.sigma1**2)


def gaussian_posterior(data: TiltedGaussian, alpha: float, beta: float, x):
    """Mean and covariance of Y given α Y + β ε = x for Gaussian Y."""
    x = np.atleast_2d(x)
    d = data.dim
    prior_prec = np.linalg.inv(data.cov)
    if beta == 0.0:
        return x / alpha, np.zeros((d, d))
    post_cov = np.linalg.inv(prior_prec + (alpha**2 / beta**2) * np.eye(d))
    rhs = prior_prec @ data.mean + (alpha / beta**2) * x
    return rhs @ post_cov.T, post_cov


# ---------------------------------------------------------------------------
# one-dimensional quadrature oracle


def _composite_gl(n_panels: int):
    u, w = np.polynomial.legendre.leggauss(GL_NODES)
    u = 0.5 * (u + 1.0)
    w = 0.5 * w
    starts = np.arange(n_panels) / n_panels
    nodes = (starts[:, None] + u[None, :] / n_panels).ravel()
    weights = np.tile(w / n_panels, n_panels)
    return nodes, weights


def _trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    w = np.zeros_like(nodes)
    gaps = np.diff(nodes)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


@dataclass
class _Posterior:
    y: np.ndarray
    weights: np.ndarray
    log_marginal: np.ndarray


@dataclass
class GridOracle1D:
    """Quadrature oracle for a one-dimensional data density given on nodes.

    Between nodes the log density is a cubic spline unless an exact
    ``logpdf_fn`` is supplied.  ``grad_fn`` gives ∇log p_data; without it the
    spline derivative (or a central difference of ``logpdf_fn``) is used.
    """

    nodes: np.ndarray
    data_logpdf: np.ndarray
    logpdf_fn: Callable | None = None
    grad_fn: Callable | None = None
    weights: np.ndarray = field(init=False)
    log_norm: float = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.data_logpdf = np.asarray(self.data_logpdf, dtype=float)
        if self.nodes.ndim != 1 or self.nodes.size < 4:
            raise OracleError("need at least four nodes")
        if np.any(np.diff(self.nodes) <= 0):
            raise OracleError("nodes must be strictly increasing")
        self.weights = _trapezoid_weights(self.nodes)
        self.log_norm = float(logsumexp(self.data_logpdf, b=self.weights))
        self.data_logpdf = self.data_logpdf - self.log_norm
        self._spline = CubicSpline(self.nodes, self.data_logpdf)
        p = np.exp(self.data_logpdf) * self.weights
        self.mean = float(np.sum(p * self.nodes))
        self.std = float(np.sqrt(np.sum(p * (self.nodes - self.mean) ** 2)))
        q = np.exp(self.data_logpdf)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (q[1:] + q[:-1]) * np.diff(self.nodes))])
        self._cdf = cdf / cdf[-1]

    @classmethod
    def from_logpdf(cls, logpdf_fn, lo: float, hi: float, n: int = 4001, grad_fn=None):
        nodes = np.linspace(lo, hi, n)
        return cls(nodes, logpdf_fn(nodes), logpdf_fn=logpdf_fn, grad_fn=grad_fn)

    @classmethod
    def gaussian(cls, mean: float = 0.0, std: float = 1.0, n: int = 4001):
        return cls.from_logpdf(lambda y: -0.5 * ((y - mean) / std) ** 2, mean - 8 * std,
                               mean + 8 * std, n, grad_fn=lambda y: -(y - mean) / std**2)

    @classmethod
    def from_csv(cls, path: str | Path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header line
        arr = np.array(rows)
        return cls(arr[:, 0], arr[:, 1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "log_density"])
            for y, lp in zip(self.nodes, self.data_logpdf):
                w.writerow([repr(float(y)), repr(float(lp))])

    # data density -----------------------------------------------------------

    def logpdf(self, y):
        y = np.asarray(y, dtype=float)
        if self.logpdf_fn is not None:
            return self.logpdf_fn(y) - self.log_norm
        return self._spline(y)

    def data_score(self, y):
        y = np.asarray(y, dtype=float)
        if self.grad_fn is not None:
            return self.grad_fn(y)
        if self.logpdf_fn is not None:
            h = 1e-4 * (1.0 + np.abs(y))
            return (self.logpdf_fn(y + h) - self.logpdf_fn(y - h)) / (2 * h)
        return self._spline(y, 1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.interp(rng.random(n), self._cdf, self.nodes)

    def log_expectation(self, fn: Callable) -> float:
        """log E_{p_data}[exp(fn(Y))] by quadrature on the nodes."""
        return float(logsumexp(self.data_logpdf + fn(self.nodes), b=self.weights))

    # noised marginals ------------------------------------------------------

    def _coeffs(self, sched: ScheduleSpec, t: float):
        if t < sched.t_min:
            raise OracleError(f"t={t} below t_min={sched.t_min}")
        alpha, beta = alpha_beta(sched, t)
        return float(alpha), float(beta)

    def _check_support(self, alpha, beta, x):
        lo = alpha * self.nodes[0] - 5 * beta
        hi = alpha * self.nodes[-1] + 5 * beta
        if np.any(x < lo) or np.any(x > hi):
            raise ExtrapolationError(f"x outside padded support [{lo:.4g}, {hi:.4g}]")

    def _posterior(self, alpha: float, beta: float, x: np.ndarray) -> _Posterior:
        width = beta / alpha
        center = x / alpha
        lo = np.maximum(self.nodes[0], center - 12 * width)
        hi = np.minimum(self.nodes[-1], center + 12 * width)
        hi = np.maximum(hi, lo + 1e-12)
        panel = min(width, 0.25 * self.std)
        n_panels = int(min(2000, max(1, np.ceil(np.max(hi - lo) / panel))))
        u, w = _composite_gl(n_panels)
        span = (hi - lo)[:, None]
        y = lo[:, None] + span * u[None, :]
        logw = (np.log(w)[None, :] + np.log(span) + self.logpdf(y)
                - 0.5 * ((x[:, None] - alpha * y) / beta) ** 2
                - 0.5 * np.log(2 * np.pi * beta**2))
        lse = logsumexp(logw, axis=1)
        return _Posterior(y, np.exp(logw - lse[:, None]), lse)

    def log_marginal(self, sched: ScheduleSpec, t: float, x):
        alpha, beta = self._coeffs(sched, t)
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        self._check_support(alpha, beta, x)
        return self._posterior(alpha, beta, x).log_marginal

    def direct_score(self, sched: ScheduleSpec, t: float, x):
        """∂_x log p_t(x) by central differences of the quadrature marginal."""
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        alpha, beta = self._coeffs(sched, t)
        h = 1e-4 * min(1.0, beta) * (1.0 + np.abs(x))
        return (self.log_marginal(sched, t, x + h) - self.log_marginal(sched, t, x - h)) / (2 * h)

    def posterior_moments(self, sched: ScheduleSpec, t: float, x):
        """E[Y | x], E[∇log p_data(Y) | x] and Var[Y | x] for X̄_t = x."""
        alpha, beta = self._coeffs(sched, t)
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        self._check_support(alpha, beta, x)
        post = self._posterior(alpha, beta, x)
        mean_y = np.sum(post.weights * post.y, axis=1)
        mean_g = np.sum(post.weights * self.data_score(post.y), axis=1)
        var_y = np.sum(post.weights * (post.y - mean_y[:, None]) ** 2, axis=1)
        return mean_y, mean_g, var_y


class Identity(str, Enum):
    CSI = "csi"
    TSI = "tsi"
    NSI = "nsi"


def score_identity(oracle: GridOracle1D, which: Identity | str, sched: ScheduleSpec, t: float, x):
    """Evaluate ∇log p_t(x) through one of the three score identities."""
    which = Identity(which)
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    alpha, beta = alpha_beta(sched, t)
    mean_y, mean_g, _ = oracle.posterior_moments(sched, t, x)
    csi = -(x - alpha * mean_y) / beta**2
    tsi = mean_g / alpha
    if which is Identity.CSI:
        return csi
    if which is Identity.TSI:
        return tsi
    return (alpha * mean_g - (x - alpha * mean_y)) / (alpha**2 + beta**2)


class Conditional(str, Enum):
    DATA_SCORE = "data_score"   # E[∇log p_data(Y) | X̄_t = x]
    NOISE = "noise"             # E[(x − α_t Y)/β_t² | X̄_t = x]
    DATA = "data"               # E[Y | X̄_t = x]


def conditional_target_mean(source, sched: ScheduleSpec, t: float, x,
                            which: Conditional | str = Conditional.DATA_SCORE):
    """Posterior expectations over the interpolant given X̄_t = x.

    ``source`` is a GaussianBase, a TiltedGaussian or a GridOracle1D.
    """
    which = Conditional(which)
    alpha, beta = alpha_beta(sched, t)
    alpha, beta = float(alpha), float(beta)
    if isinstance(source, GridOracle1D):
        x1 = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if beta == 0.0:
            mean_y, mean_g = x1 / alpha, source.data_score(x1 / alpha)
        else:
            mean_y, mean_g, _ = source.posterior_moments(sched, t, x1)
        out = {Conditional.DATA: mean_y, Conditional.DATA_SCORE: mean_g}.get(which)
        if out is None:
            out = (x1 - alpha * mean_y) / beta**2
        return out
    data = base_as_tilted(source) if isinstance(source, GaussianBase) else source
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    mean_y, _ = gaussian_posterior(data, alpha, beta, x2)
    if which is Conditional.DATA:
        return mean_y
    if which is Conditional.DATA_SCORE:
        return -(mean_y - data.mean) @ np.linalg.inv(data.cov).T
    return (x2 - alpha * mean_y) / beta**2


def log_concavity_check(oracle: GridOracle1D, gamma: float, sched: ScheduleSpec, t: float,
                        n_grid: int = 41, rel_step: float = 1e-3) -> float:
    """Worst slack of −∂²log p_t against the bound γ/(α_t² + γβ_t²)."""
    alpha, beta = oracle._coeffs(sched, t)
    scale = np.sqrt(alpha**2 * oracle.std**2 + beta**2)
    h = rel_step * scale
    if n_grid < 3 or rel_step < 1e-5 or rel_step > 0.05:
        raise ResolutionError("grid too coarse or step unstable for second differences")
    centre = alpha * oracle.mean
    x = centre + np.linspace(-3, 3, n_grid) * scale
    lm = oracle.log_marginal(sched, t, np.concatenate([x - h, x, x + h]))
    lo, mid, hi = lm[:n_grid], lm[n_grid:2 * n_grid], lm[2 * n_grid:]
    curvature = -(hi - 2 * mid + lo) / h**2
    return float(np.min(curvature - gamma / (alpha**2 + gamma * beta**2)))
