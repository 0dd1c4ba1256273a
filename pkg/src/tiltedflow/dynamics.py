"""Euler–Maruyama integrators, the lean adjoint ODE and path bookkeeping.

Vector fields are callables ``f(x, t)`` with ``x`` of shape (n, d) and a
scalar time ``t``; noise levels are callables ``sigma(t)`` returning a scalar.
A batch of n paths is stored as one ``Trajectory`` with arrays indexed
``[path, step, coord]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .oracle import fd_step
from .schedule import ScheduleSpec, chi, coefficients, exp_int_chi

Field = Callable[[np.ndarray, float], np.ndarray]
Noise = Callable[[float], float]


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# random streams


def path_generator(seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one path; independent of batch order."""
    key = np.random.SeedSequence([int(seed), int(stream)]).generate_state(2, dtype=np.uint64)
    counter = np.array([0, 0, 0, int(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def path_normals(seed: int, paths: Sequence[int], shape: tuple, stream: int = 0) -> np.ndarray:
    """Standard normals of the given per-path shape, stacked over ``paths``."""
    return np.stack([path_generator(seed, i, stream).standard_normal(shape) for i in paths])


def _path_indices(paths) -> np.ndarray:
    if isinstance(paths, (int, np.integer)):
        return np.arange(int(paths))
    return np.asarray(paths, dtype=np.int64)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    grid: np.ndarray          # (K+1,)
    states: np.ndarray        # (n, K+1, d)
    noises: np.ndarray        # (n, K, d) standard normals
    drift_left: np.ndarray    # (n, K, d)
    sigma: np.ndarray         # (K,) noise level at left endpoints

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.grid.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1]

    def forward_increments(self) -> np.ndarray:
        return np.sqrt(self.dt)[None, :, None] * self.noises


@dataclass(frozen=True)
class PathBundle(Trajectory):
    drift_right: np.ndarray = None     # (n, K, d) drift at right endpoints
    backward_dw: np.ndarray = None     # (n, K, d) ←ΔW_k
    sigma_right: np.ndarray = None     # (K,) noise level at right endpoints


@dataclass(frozen=True)
class AdjointPath:
    grid: np.ndarray
    states: np.ndarray  # (n, K+1, d)


def _sigma_values(noise: Noise, times) -> np.ndarray:
    return np.array([float(noise(t)) for t in times])


def _init_states(init, z0: np.ndarray) -> np.ndarray:
    if callable(init):
        return np.asarray(init(z0), dtype=float)
    x0 = np.asarray(init, dtype=float)
    return np.broadcast_to(x0, z0.shape).copy() if x0.ndim <= 1 else x0.copy()


def simulate(drift: Field, noise: Noise, init, grid: np.ndarray, seed: int = 0,
             paths=1, dim: int = 1, stream: int = 0,
             noises: np.ndarray | None = None) -> Trajectory:
    """Forward Euler–Maruyama.

    ``init`` is either an array of initial states or a callable mapping
    standard normals of shape (n, d) to initial states.  Passing ``noises``
    (and array-valued ``init``) replays a stored path bit-exactly.
    """
    grid = np.asarray(grid, dtype=float)
    K = grid.size - 1
    idx = _path_indices(paths)
    if noises is None:
        z = path_normals(seed, idx, (K + 1, dim), stream)
        z0, noises = z[:, 0], z[:, 1:]
    else:
        z0 = np.zeros((noises.shape[0], noises.shape[2]))
    n, d = noises.shape[0], noises.shape[2]
    sig = _sigma_values(noise, grid[:-1])
    states = np.empty((n, K + 1, d))
    drifts = np.empty((n, K, d))
    states[:, 0] = _init_states(init, z0)
    for k in range(K):
        dt = grid[k + 1] - grid[k]
        b = drift(states[:, k], grid[k])
        drifts[:, k] = b
        states[:, k + 1] = states[:, k] + dt * drifts[:, k] + np.sqrt(dt) * sig[k] * noises[:, k]
        if not np.all(np.isfinite(states[:, k + 1])):
            raise DivergenceError(k + 1)
    return Trajectory(grid, states, noises, drifts, sig)


def simulate_backward(drift: Field, noise: Noise, terminal, grid: np.ndarray, seed: int = 0,
                      paths=1, dim: int = 1, stream: int = 0) -> PathBundle:
    """Backward Euler–Maruyama in forward-time convention.

    The path satisfies Y_{k+1} − Y_k = Δt·b(Y_{k+1}, t_{k+1}) + σ(t_{k+1})·←ΔW_k,
    generated right to left from the terminal sampler.
    """
    grid = np.asarray(grid, dtype=float)
    K = grid.size - 1
    idx = _path_indices(paths)
    z = path_normals(seed, idx, (K + 1, dim), stream)
    n = z.shape[0]
    sig_r = _sigma_values(noise, grid[1:])
    states = np.empty((n, K + 1, dim))
    drifts = np.empty((n, K, dim))
    bwd = np.empty((n, K, dim))
    states[:, K] = _init_states(terminal, z[:, 0])
    for k in range(K - 1, -1, -1):
        dt = grid[k + 1] - grid[k]
        b = drift(states[:, k + 1], grid[k + 1])
        drifts[:, k] = b
        bwd[:, k] = -np.sqrt(dt) * z[:, k + 1]
        states[:, k] = states[:, k + 1] - dt * b - sig_r[k] * bwd[:, k]
        if not np.all(np.isfinite(states[:, k])):
            raise DivergenceError(k)
    fwd, _, left, _ = increments(states, grid, drift, noise)
    sig_l = _sigma_values(noise, grid[:-1])
    fwd_noise = fwd / np.sqrt(np.diff(grid))[None, :, None]
    return PathBundle(grid, states, fwd_noise, left, sig_l, drifts, bwd, sig_r)


def increments(states: np.ndarray, grid: np.ndarray, drift: Field, noise: Noise):
    """Forward and backward noise increments of a path relative to ``drift``.

    Returns (→ΔW, ←ΔW, drift_left, drift_right) where
    ΔY_k = Δt·a(Y_k, t_k) + σ(t_k)→ΔW_k = Δt·a(Y_{k+1}, t_{k+1}) + σ(t_{k+1})←ΔW_k.
    """
    K = grid.size - 1
    dt = np.diff(grid)[None, :, None]
    left = np.stack([drift(states[:, k], grid[k]) for k in range(K)], axis=1)
    right = np.stack([drift(states[:, k + 1], grid[k + 1]) for k in range(K)], axis=1)
    sig_l = _sigma_values(noise, grid[:-1])[None, :, None]
    sig_r = _sigma_values(noise, grid[1:])[None, :, None]
    dy = np.diff(states, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.where(sig_l > 0, (dy - dt * left) / sig_l, 0.0)
        bwd = np.where(sig_r > 0, (dy - dt * right) / sig_r, 0.0)
    return fwd, bwd, left, right


def to_bundle(traj: Trajectory, drift: Field, noise: Noise) -> PathBundle:
    """Attach right-endpoint drifts and backward increments to a forward path."""
    _, bwd, _, right = increments(traj.states, traj.grid, drift, noise)
    sig_r = _sigma_values(noise, traj.grid[1:])
    return PathBundle(traj.grid, traj.states, traj.noises, traj.drift_left, traj.sigma,
                      right, bwd, sig_r)


def trajectory_to_csv(traj: Trajectory, path: str | Path) -> None:
    d = traj.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"x{i}" for i in range(d)])
        for p in range(traj.n_paths):
            for k, t in enumerate(traj.grid):
                w.writerow([p, repr(float(t))] + [repr(float(v)) for v in traj.states[p, k]])


# ---------------------------------------------------------------------------
# drifts for the reference and generative processes


def generative_drift(sched: ScheduleSpec, score: Field, noise: Noise | None = None) -> Field:
    """κx + (σ²/2 + η)𝔰; with ``noise=None`` the memoryless choice σ² = 2η."""

    def drift(x, t):
        c = coefficients(sched, t)
        sig2 = 2 * c.eta if noise is None else float(noise(t)) ** 2
        return c.kappa * x + (0.5 * sig2 + c.eta) * score(x, t)

    return drift


def controlled_drift(base_drift: Field, noise: Noise, control: Field) -> Field:
    """b_σ + σ(t)u."""
    return lambda x, t: base_drift(x, t) + float(noise(t)) * control(x, t)


def memoryless_noise(sched: ScheduleSpec) -> Noise:
    return lambda t: float(coefficients(sched, t).sigma_mem)


# ---------------------------------------------------------------------------
# lean adjoint

JacT = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


def gaussian_base_jacobian(sched: ScheduleSpec, sigma1: float) -> JacT:
    """∇b_σᵀa = χ_t a for the memoryless drift of a Gaussian base."""
    return lambda x, t, a: float(chi(sched, sigma1, t)) * a


def fd_jacobian(drift: Field) -> JacT:
    """Central-difference ∇b(x,t)ᵀa with step 1e-4·(1+‖x‖)."""

    def jt(x, t, a):
        x = np.atleast_2d(x)
        n, d = x.shape
        h = fd_step(x)[:, None]
        out = np.empty_like(x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            col = (drift(x + h * e, t) - drift(x - h * e, t)) / (2 * h)
            out[:, i] = np.sum(col * a, axis=1)
        return out

    return jt


def solve_lean_adjoint(traj: Trajectory, jac: JacT, reward_grad: Callable) -> AdjointPath:
    """Explicit Euler for d/dt ã = −∇b_σᵀã from ã(t_K) = −∇r(X_{t_K})."""
    K = traj.steps
    adj = np.empty_like(traj.states)
    adj[:, K] = -reward_grad(traj.states[:, K])
    for k in range(K - 1, -1, -1):
        dt = traj.grid[k + 1] - traj.grid[k]
        try:
            step = jac(traj.states[:, k + 1], traj.grid[k + 1], adj[:, k + 1])
        except Exception as exc:  # noqa: BLE001
            raise RuntimeError(f"Jacobian failed at step {k + 1}: {exc}") from exc
        adj[:, k] = adj[:, k + 1] + dt * step
    return AdjointPath(traj.grid, adj)


def closed_form_adjoint(sched: ScheduleSpec, sigma1: float, t, reward_grad_terminal,
                        t_end: float = 1.0) -> np.ndarray:
    """−exp(∫_t^{t_end} χ)·∇r(X_{t_end}) for a Gaussian base."""
    ratio = exp_int_chi(sched, sigma1, t) / exp_int_chi(sched, sigma1, t_end)
    g = np.asarray(reward_grad_terminal, dtype=float)
    return -np.multiply.outer(ratio, g) if np.ndim(ratio) else -ratio * g


def adjoint_norm_bound_check(adj: AdjointPath, sched: ScheduleSpec, sigma1: float) -> float:
    """max_k (‖ã(t_k)‖ − exp(∫_{t_k}^{t_K} χ)·‖ã(t_K)‖), where ã(t_K) = −∇r(X_{t_K})."""
    t_end = adj.grid[-1]
    g = np.linalg.norm(adj.states[:, -1], axis=-1)
    ratio = exp_int_chi(sched, sigma1, adj.grid) / exp_int_chi(sched, sigma1, t_end)
    norms = np.linalg.norm(adj.states, axis=-1)
    return float(np.max(norms - ratio[None, :] * g[:, None]))
