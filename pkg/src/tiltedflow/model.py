"""Learnable vector fields with hand-written reverse-mode gradients.

Two families share one interface:

* ``AffineField``: u(x,t) = A(t)x + b(t), piecewise linear in t between knots.
* ``MlpField``: two tanh hidden layers on features (x, t, sin 2πt, cos 2πt).

Parameters live in a flat float64 vector so optimizers and serialization do
not need to know the family.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle import fd_step

MAGIC = "TILTEDFLOW-PARAMS"


class ModelError(ValueError):
    pass


def _batch(x, t):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return x, t


class VectorField:
    dim: int
    params: np.ndarray

    def eval(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, t):
        return self.eval(x, t)

    def vjp_params(self, x, t, upstream) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def divergence_vjp_params(self, x, t, upstream) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, params: np.ndarray) -> "VectorField":
        raise NotImplementedError

    def header(self) -> dict:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.params.size

    def _check(self, x):
        if x.shape[1] != self.dim:
            raise ModelError(f"expected dimension {self.dim}, got {x.shape[1]}")


@dataclass
class AffineField(VectorField):
    knots: np.ndarray
    dim: int = 1
    params: np.ndarray = None

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if np.any(np.diff(self.knots) <= 0):
            raise ModelError("knots must be strictly increasing")
        size = self.knots.size * (self.dim * self.dim + self.dim)
        if self.params is None:
            self.params = np.zeros(size)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.size != size:
            raise ModelError(f"expected {size} parameters, got {self.params.size}")

    @classmethod
    def uniform(cls, n_knots: int = 11, dim: int = 1, t_min: float = 1e-3,
                t_max: float = 1 - 1e-3):
        return cls(np.linspace(t_min, t_max, n_knots), dim)

    @property
    def A(self) -> np.ndarray:
        m, d = self.knots.size, self.dim
        return self.params[: m * d * d].reshape(m, d, d)

    @property
    def b(self) -> np.ndarray:
        m, d = self.knots.size, self.dim
        return self.params[m * d * d:].reshape(m, d)

    def set_blocks(self, A, b) -> "AffineField":
        m, d = self.knots.size, self.dim
        A = np.broadcast_to(np.asarray(A, dtype=float), (m, d, d))
        b = np.broadcast_to(np.asarray(b, dtype=float), (m, d))
        return AffineField(self.knots, d, np.concatenate([A.ravel(), b.ravel()]))

    def weights(self, t) -> np.ndarray:
        """Linear-interpolation weights of shape (n, n_knots); clamped outside the knots."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tc = np.clip(t, self.knots[0], self.knots[-1])
        hi = np.clip(np.searchsorted(self.knots, tc, side="right"), 1, self.knots.size - 1)
        lo = hi - 1
        frac = (tc - self.knots[lo]) / (self.knots[hi] - self.knots[lo])
        w = np.zeros((t.size, self.knots.size))
        rows = np.arange(t.size)
        w[rows, lo] = 1.0 - frac
        w[rows, hi] += frac
        return w

    def eval(self, x, t):
        x, t = _batch(x, t)
        self._check(x)
        w = self.weights(t)
        A_t = np.einsum("nk,kij->nij", w, self.A)
        return np.einsum("nij,nj->ni", A_t, x) + w @ self.b

    def jacobian(self, x, t):
        x, t = _batch(x, t)
        return np.einsum("nk,kij->nij", self.weights(t), self.A)

    def vjp_params(self, x, t, upstream):
        x, t = _batch(x, t)
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        w = self.weights(t)
        gA = np.einsum("nk,ni,nj->kij", w, g, x)
        gb = w.T @ g
        return np.concatenate([gA.ravel(), gb.ravel()])

    def divergence(self, x, t):
        x, t = _batch(x, t)
        return self.weights(t) @ np.trace(self.A, axis1=1, axis2=2)

    def divergence_vjp_params(self, x, t, upstream):
        x, t = _batch(x, t)
        u = np.broadcast_to(np.asarray(upstream, dtype=float), (x.shape[0],))
        per_knot = self.weights(t).T @ u
        gA = per_knot[:, None, None] * np.eye(self.dim)[None]
        return np.concatenate([gA.ravel(), np.zeros(self.knots.size * self.dim)])

    def with_params(self, params):
        return AffineField(self.knots, self.dim, np.array(params, dtype=float))

    def header(self):
        return {"family": "affine", "dim": self.dim, "knots": self.knots.tolist()}


@dataclass
class MlpField(VectorField):
    dim: int = 1
    width: int = 64
    params: np.ndarray = None
    seed: int = 0
    shapes: list = field(init=False)

    def __post_init__(self):
        d_in = self.dim + 3
        self.shapes = [(self.width, d_in), (self.width,), (self.width, self.width), (self.width,),
                       (self.dim, self.width), (self.dim,)]
        size = sum(int(np.prod(s)) for s in self.shapes)
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            parts = []
            for s in self.shapes:
                fan_in = s[1] if len(s) == 2 else s[0]
                bound = 1e-2 / np.sqrt(fan_in)
                parts.append(rng.uniform(-bound, bound, size=s).ravel())
            self.params = np.concatenate(parts)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.size != size:
            raise ModelError(f"expected {size} parameters, got {self.params.size}")

    def _unpack(self):
        out, pos = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            out.append(self.params[pos:pos + n].reshape(s))
            pos += n
        return out

    @staticmethod
    def features(x, t):
        return np.column_stack([x, t, np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)])

    def _forward(self, x, t):
        W1, b1, W2, b2, W3, b3 = self._unpack()
        z = self.features(x, t)
        h1 = np.tanh(z @ W1.T + b1)
        h2 = np.tanh(h1 @ W2.T + b2)
        return z, h1, h2, h2 @ W3.T + b3

    def eval(self, x, t):
        x, t = _batch(x, t)
        self._check(x)
        return self._forward(x, t)[3]

    def vjp_params(self, x, t, upstream):
        x, t = _batch(x, t)
        W1, b1, W2, b2, W3, b3 = self._unpack()
        z, h1, h2, _ = self._forward(x, t)
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        gW3 = g.T @ h2
        gb3 = g.sum(0)
        d2 = (g @ W3) * (1 - h2**2)
        gW2 = d2.T @ h1
        gb2 = d2.sum(0)
        d1 = (d2 @ W2) * (1 - h1**2)
        gW1 = d1.T @ z
        gb1 = d1.sum(0)
        return np.concatenate([p.ravel() for p in (gW1, gb1, gW2, gb2, gW3, gb3)])

    def jacobian(self, x, t):
        """Analytic ∂u/∂x of shape (n, d, d)."""
        x, t = _batch(x, t)
        W1, _, W2, _, W3, _ = self._unpack()
        _, h1, h2, _ = self._forward(x, t)
        inner = np.einsum("jk,nk,kl->njl", W2, 1 - h1**2, W1[:, : self.dim])
        return np.einsum("ij,nj,njl->nil", W3, 1 - h2**2, inner)

    def divergence_exact(self, x, t):
        return np.trace(self.jacobian(x, t), axis1=1, axis2=2)

    def divergence(self, x, t):
        x, t = _batch(x, t)
        h = fd_step(x)
        total = np.zeros(x.shape[0])
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            step = h[:, None] * e
            total += (self.eval(x + step, t)[:, i] - self.eval(x - step, t)[:, i]) / (2 * h)
        return total

    def divergence_vjp_params(self, x, t, upstream):
        x, t = _batch(x, t)
        u = np.broadcast_to(np.asarray(upstream, dtype=float), (x.shape[0],))
        h = fd_step(x)
        total = np.zeros(self.n_params)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            g = np.outer(u / (2 * h), e)
            step = h[:, None] * e
            total += self.vjp_params(x + step, t, g) - self.vjp_params(x - step, t, g)
        return total

    def with_params(self, params):
        return MlpField(self.dim, self.width, np.array(params, dtype=float), self.seed)

    def header(self):
        return {"family": "mlp", "dim": self.dim, "width": self.width}


@dataclass
class GradAccumulator:
    total: np.ndarray
    count: int = 0

    @classmethod
    def like(cls, field_: VectorField):
        return cls(np.zeros(field_.n_params))

    def add(self, grad: np.ndarray, count: int = 1) -> None:
        if grad.size != self.total.size:
            raise ModelError("gradient length does not match parameters")
        self.total = self.total + grad
        self.count += count

    def merge(self, other: "GradAccumulator") -> "GradAccumulator":
        return GradAccumulator(self.total + other.total, self.count + other.count)

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ModelError("empty accumulator")
        return self.total / self.count


def save_params(field_: VectorField, path: str | Path, extra: dict | None = None) -> None:
    """Text header line followed by little-endian float64 parameters."""
    head = dict(field_.header())
    head["n_params"] = int(field_.n_params)
    head["dtype"] = "<f8"
    if extra:
        head["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {json.dumps(head)}\n".encode())
        fh.write(np.asarray(field_.params, dtype="<f8").tobytes())


def load_params(path: str | Path) -> VectorField:
    with open(path, "rb") as fh:
        line = fh.readline().decode()
        if not line.startswith(MAGIC):
            raise ModelError("not a parameter file")
        head = json.loads(line[len(MAGIC):])
        params = np.frombuffer(fh.read(), dtype="<f8").copy()
    if params.size != head["n_params"]:
        raise ModelError("truncated parameter file")
    if head["family"] == "affine":
        return AffineField(np.array(head["knots"]), head["dim"], params)
    if head["family"] == "mlp":
        return MlpField(head["dim"], head["width"], params)
    raise ModelError(f"unknown family {head['family']}")


class FunctionField(VectorField):
    """Fixed (non-trainable) field from callables, e.g. an oracle transport."""

    def __init__(self, fn, div_fn=None, dim: int = 1, name: str = "function"):
        self.fn = fn
        self.div_fn = div_fn
        self.dim = dim
        self.name = name
        self.params = np.zeros(0)

    def eval(self, x, t):
        x, t = _batch(x, t)
        return np.asarray(self.fn(x, t[0] if np.all(t == t[0]) else t), dtype=float).reshape(x.shape)

    def divergence(self, x, t):
        x, tt = _batch(x, t)
        if self.div_fn is None:
            raise ModelError(f"field '{self.name}' has no divergence")
        return np.broadcast_to(np.asarray(self.div_fn(x, tt[0]), dtype=float), (x.shape[0],))

    def vjp_params(self, x, t, upstream):
        return np.zeros(0)

    def divergence_vjp_params(self, x, t, upstream):
        return np.zeros(0)

    def with_params(self, params):
        return self

    def header(self):
        return {"family": "function", "dim": self.dim, "name": self.name}


def zero_field(dim: int = 1) -> FunctionField:
    return FunctionField(lambda x, t: np.zeros_like(x), lambda x, t: np.zeros(x.shape[0]), dim, "zero")
