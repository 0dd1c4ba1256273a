"""Training loops, the Adam optimizer and sampler-quality metrics."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt

from .dynamics import (DivergenceError, controlled_drift, gaussian_base_jacobian,
                       generative_drift, memoryless_noise, path_generator, simulate,
                       solve_lean_adjoint)
from .model import AffineField, MlpField, VectorField
from .oracle import GaussianBase, RewardSpec, TiltedGaussian, gaussian_score, tilt_gaussian
from .schedule import ScheduleSpec, marginal_var, time_grid
from .soc import (Method as SocMethod, am_targets, as_targets, control_cost,
                  regression_loss_grad, sm_targets)
from .thermo import (PolyFreeEnergy, RewardPath, ThermoProblem, cmcd_kl_grad, cmcd_logvar_grad,
                     nets_loss, nets_loss_grad, nets_residual)
from .thermo import forward_paths as thermo_forward

# RNG streams
STREAM_ROLLOUT = 1
STREAM_TARGETS = 2
STREAM_EVAL = 3
STREAM_REFERENCE = 4


class Method(str, Enum):
    AM = "AM"
    AS = "AS"
    TSM = "TSM"
    CSM = "CSM"
    NSM = "NSM"
    IDEM = "iDEM"
    CMCD_KL = "CMCD-KL"
    CMCD_LV = "CMCD-LV"
    NETS = "NETS"

    @property
    def thermodynamic(self) -> bool:
        return self in (Method.CMCD_KL, Method.CMCD_LV, Method.NETS)

    @property
    def score_matching(self) -> bool:
        return self in (Method.TSM, Method.CSM, Method.NSM, Method.IDEM)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Method = Method.AM
    iters: PositiveInt = 500
    batch: PositiveInt = 256
    lr: PositiveFloat = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: PositiveFloat = 1e-8
    seed: int = 0
    steps: PositiveInt = 100
    n_noisings: PositiveInt = 8
    replay: PositiveInt = 64
    on_policy: bool = False
    idem_n: PositiveInt = 128
    eval_every: PositiveInt = 50
    eval_samples: PositiveInt = 2000
    grad_clip: PositiveFloat = 1e3
    lv_reference: Literal["on_policy", "zero"] = "on_policy"
    nets_degree: PositiveInt = 3
    nets_solver: Literal["adam", "lstsq"] = "adam"
    field: Literal["affine", "mlp"] = "affine"
    knots: int = Field(11, ge=2)
    width: PositiveInt = 64


@dataclass(frozen=True)
class Problem:
    sched: ScheduleSpec
    base: GaussianBase
    reward: RewardSpec
    lambda_fn: str = "linear"

    def target(self) -> TiltedGaussian:
        return tilt_gaussian(self.base, self.reward)

    def thermo(self) -> ThermoProblem:
        return ThermoProblem(self.sched, self.base, RewardPath.named(self.reward, self.lambda_fn))

    def base_drift(self):
        return generative_drift(self.sched, lambda x, t: gaussian_score(self.base, self.sched, t, x))

    def noise(self):
        return memoryless_noise(self.sched)


@dataclass
class MetricsRecord:
    iter: int
    loss: float
    grad_norm: float
    mean_error: float = float("nan")
    cov_error: float = float("nan")
    kl: float = float("nan")
    control_cost: float | None = None
    n_samples: int = 0

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
             for k, v in asdict(self).items()}
        return json.dumps(d)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: np.ndarray, records: list):
        super().__init__(message)
        self.params = params
        self.records = records


class EmptyEvaluationError(ValueError):
    pass


class Adam:
    """Bias-corrected first and second moment adaptive steps."""

    def __init__(self, size: int, lr: float = 1e-2, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip(grad: np.ndarray, limit: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    return grad * (limit / norm) if norm > limit else grad


def make_field(config: TrainConfig, problem: Problem) -> VectorField:
    d = problem.base.dim
    if config.field == "affine":
        return AffineField.uniform(config.knots, d, problem.sched.t_min, problem.sched.t_max)
    return MlpField(d, config.width, seed=config.seed)


# ---------------------------------------------------------------------------
# rollouts


def _initial_sampler(problem: Problem):
    std = float(np.sqrt(marginal_var(problem.sched, problem.base.sigma1, problem.sched.t_min)))
    return lambda z: std * z


def rollout(problem: Problem, u: VectorField, n: int, steps: int, seed: int, stream: int,
            start: int = 0):
    """Paths of the controlled generative SDE from the base marginal at t_min."""
    grid = time_grid(problem.sched, steps)
    drift = controlled_drift(problem.base_drift(), problem.noise(), u.eval)
    return simulate(drift, problem.noise(), _initial_sampler(problem), grid, seed,
                    range(start, start + n), problem.base.dim, stream)


# ---------------------------------------------------------------------------
# metrics


def gaussian_kl(m0, c0, m1, c1) -> float:
    """KL(N(m0, c0) ‖ N(m1, c1))."""
    m0, m1 = np.atleast_1d(m0), np.atleast_1d(m1)
    c0, c1 = np.atleast_2d(c0), np.atleast_2d(c1)
    d = m0.size
    inv = np.linalg.inv(c1)
    diff = m1 - m0
    _, ld0 = np.linalg.slogdet(c0)
    _, ld1 = np.linalg.slogdet(c1)
    return float(0.5 * (np.trace(inv @ c0) + diff @ inv @ diff - d + ld1 - ld0))


def sample_metrics(samples: np.ndarray, target: TiltedGaussian) -> dict:
    samples = np.atleast_2d(samples)
    if samples.shape[0] < 2:
        raise EmptyEvaluationError("need at least two samples to evaluate")
    mean = samples.mean(0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    return {"mean_error": float(np.linalg.norm(mean - target.mean)),
            "cov_error": float(np.linalg.norm(cov - target.cov)),
            "kl": gaussian_kl(mean, cov, target.mean, target.cov),
            "mean": mean.tolist(), "cov": cov.tolist()}


def evaluate_sampler(field_: VectorField, problem: Problem, n_samples: int,
                     config: TrainConfig | None = None, seed: int = 0, it: int = 0,
                     loss: float = float("nan"), grad_norm: float = float("nan")):
    """Simulate terminal samples and score them against the analytic tilt.

    Returns (MetricsRecord, samples).
    """
    if n_samples <= 0:
        raise EmptyEvaluationError("n_samples must be positive")
    config = config or TrainConfig()
    cost = None
    if config.method.thermodynamic:
        x = thermo_forward(problem.thermo(), field_, n_samples, config.steps, seed,
                           STREAM_EVAL).terminal
    else:
        traj = rollout(problem, field_, n_samples, config.steps, seed, STREAM_EVAL)
        x = traj.terminal
        cost = control_cost(field_.eval, traj, problem.reward)[0]
    m = sample_metrics(x, problem.target())
    rec = MetricsRecord(it, loss, grad_norm, m["mean_error"], m["cov_error"], m["kl"], cost,
                        n_samples)
    return rec, x


# ---------------------------------------------------------------------------
# per-method gradient steps


class _Stepper:
    def __init__(self, config: TrainConfig, problem: Problem):
        self.config = config
        self.problem = problem
        self.buffer: deque = deque(maxlen=config.replay)
        self.F = PolyFreeEnergy(np.zeros(config.nets_degree))
        if config.method is Method.AS and not isinstance(problem.base, GaussianBase):
            raise ValueError("adjoint sampling needs a Gaussian base")
        if config.method is Method.AM:
            self.jac = gaussian_base_jacobian(problem.sched, problem.base.sigma1)

    def __call__(self, field_: VectorField, it: int):
        m = self.config.method
        if m is Method.AM:
            return self._am(field_, it)
        if m is Method.AS:
            return self._as(field_, it)
        if m.score_matching:
            return self._sm(field_, it)
        return self._thermo(field_, it)

    def _am(self, u, it):
        c, p = self.config, self.problem
        traj = rollout(p, u, c.batch, c.steps, c.seed, STREAM_ROLLOUT, it * c.batch)
        adj = solve_lean_adjoint(traj, self.jac, p.reward.grad)
        return regression_loss_grad(u, am_targets(traj, adj, p.sched))

    def _as(self, u, it):
        c, p = self.config, self.problem
        fresh = max(1, c.batch // c.n_noisings)
        traj = rollout(p, u, fresh, c.steps, c.seed, STREAM_ROLLOUT, it * fresh)
        self.buffer.extend(traj.terminal)
        x1 = np.array(self.buffer)
        rng = path_generator(c.seed, it, STREAM_TARGETS)
        return regression_loss_grad(u, as_targets(x1, p.reward, p.sched, p.base, c.n_noisings, rng))

    def _sm(self, u, it):
        c, p = self.config, self.problem
        rng = path_generator(c.seed, it, STREAM_TARGETS)
        if c.on_policy:
            y = rollout(p, u, c.batch, c.steps, c.seed, STREAM_ROLLOUT, it * c.batch).terminal
        else:
            y = p.target().sample(rng, c.batch)
        t = rng.uniform(p.sched.t_min, p.sched.t_max, size=c.batch)
        eps = rng.standard_normal(y.shape)
        samples = sm_targets(
            SocMethod(c.method.value), y, eps, t, p.sched,
            score_fn=lambda z: p.base.score(z) + p.reward.grad(z),
            base_score=lambda x, tt: gaussian_score(p.base, p.sched, tt, x),
            data_logpdf=lambda z: p.base.logpdf(z) + p.reward.value(z),
            idem_n=c.idem_n, rng=rng)
        return regression_loss_grad(u, samples)

    def _thermo(self, v, it):
        c, p = self.config, self.problem
        tp = p.thermo()
        if c.method is Method.CMCD_LV and c.lv_reference == "zero":
            ref = AffineField.uniform(2, p.base.dim, p.sched.t_min, p.sched.t_max)
            bundle = thermo_forward(tp, ref, c.batch, c.steps, c.seed, STREAM_REFERENCE)
        else:
            bundle = thermo_forward(tp, v, c.batch, c.steps, c.seed + 7919 * it, STREAM_ROLLOUT)
        if c.method is Method.CMCD_LV:
            return cmcd_logvar_grad(tp, v, bundle)
        if c.method is Method.CMCD_KL:
            return cmcd_kl_grad(tp, v, bundle)
        loss, gv, gF = nets_loss_grad(tp, v, self.F, bundle.states, bundle.grid)
        self._grad_F = gF
        return loss, gv


def nets_lstsq(problem: ThermoProblem, v: VectorField, F: PolyFreeEnergy, states: np.ndarray,
               grid: np.ndarray):
    """Exact minimizer of the NETS loss on fixed probe states.

    The residual is affine in (v parameters, F coefficients) when v is affine
    in its parameters, so it is recovered column by column from unit vectors
    and solved as a weighted least-squares problem.
    """
    n_v, n_f = v.n_params, F.degree
    span = grid[-1] - grid[0]

    def residuals(theta):
        vf = v.with_params(theta[:n_v])
        Ff = PolyFreeEnergy(theta[n_v:])
        rows = []
        for k in range(grid.size - 1):
            w = np.sqrt((grid[k + 1] - grid[k]) / span)
            rows.append(w * nets_residual(problem, vf, Ff.derivative, states[:, k], grid[k]))
        return np.concatenate(rows)

    theta0 = np.zeros(n_v + n_f)
    r0 = residuals(theta0)
    J = np.empty((r0.size, theta0.size))
    for i in range(theta0.size):
        e = theta0.copy()
        e[i] = 1.0
        J[:, i] = residuals(e) - r0
    theta, *_ = np.linalg.lstsq(J, -r0, rcond=None)
    return v.with_params(theta[:n_v]), PolyFreeEnergy(theta[n_v:])


def train(config: TrainConfig, problem: Problem, field_: VectorField | None = None):
    """Run the configured method; returns (field, records, extras)."""
    field_ = field_ or make_field(config, problem)
    step = _Stepper(config, problem)
    nets = config.method is Method.NETS
    params = field_.params.copy()
    if nets:
        params = np.concatenate([params, step.F.coef])
    opt = Adam(params.size, config.lr, config.betas, config.eps)
    records: list[MetricsRecord] = []
    n_field = field_.n_params
    for it in range(config.iters):
        if nets and config.nets_solver == "lstsq":
            tp = problem.thermo()
            bundle = thermo_forward(tp, field_, config.batch, config.steps,
                                    config.seed + 7919 * it, STREAM_ROLLOUT)
            field_, step.F = nets_lstsq(tp, field_, step.F, bundle.states, bundle.grid)
            params = np.concatenate([field_.params, step.F.coef])
            loss = nets_loss(tp, field_, step.F, bundle.states, bundle.grid)[0]
            if (it + 1) % config.eval_every == 0 or it + 1 == config.iters:
                rec, _ = evaluate_sampler(field_, problem, config.eval_samples, config,
                                          config.seed, it + 1, loss, 0.0)
                records.append(rec)
            continue
        try:
            loss, grad = step(field_, it)
        except (DivergenceError, FloatingPointError) as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", field_.params, records) from exc
        if nets:
            grad = np.concatenate([grad, step._grad_F])
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", field_.params, records)
        grad = clip(grad, config.grad_clip)
        params = opt.step(params, grad)
        field_ = field_.with_params(params[:n_field])
        if nets:
            step.F = PolyFreeEnergy(params[n_field:].copy())
        if (it + 1) % config.eval_every == 0 or it + 1 == config.iters:
            try:
                rec, _ = evaluate_sampler(field_, problem, config.eval_samples, config,
                                          config.seed, it + 1, loss, float(np.linalg.norm(grad)))
            except (DivergenceError, FloatingPointError) as exc:
                raise TrainingDiverged(f"evaluation at {it + 1}: {exc}", field_.params,
                                       records) from exc
            records.append(rec)
    return field_, records, {"free_energy": step.F if nets else None}
