import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiltedflow.model import (
    AffineField, GradAccumulator, MlpField, ModelError, load_params, save_params, zero_field,
)


def rand_affine(dim=2, knots=5, seed=0):
    f = AffineField.uniform(knots, dim)
    return f.with_params(np.random.default_rng(seed).normal(size=f.n_params))


def numeric_vjp(f, x, t, up, h=1e-6):
    out = np.empty(f.n_params)
    for j in range(f.n_params):
        p = f.params.copy()
        p[j] += h
        hi = np.sum(f.with_params(p).eval(x, t) * up)
        p[j] -= 2 * h
        lo = np.sum(f.with_params(p).eval(x, t) * up)
        out[j] = (hi - lo) / (2 * h)
    return out


def test_affine_eval_examples():
    f = AffineField.uniform(4, 2).set_blocks(0.0, [3.0, -1.0])
    x = np.random.default_rng(1).normal(size=(6, 2))
    assert np.allclose(f.eval(x, np.linspace(0, 1, 6)), [3.0, -1.0])
    g = AffineField.uniform(4, 2).set_blocks(np.eye(2), 0.0)
    assert np.allclose(g.eval(np.array([[1.0, 2.0]]), 0.3), [[1.0, 2.0]])


def test_zero_mlp_output():
    f = MlpField(2, 8)
    f = f.with_params(np.zeros(f.n_params))
    assert np.all(f.eval(np.ones((3, 2)), 0.5) == 0)


def test_divergence_examples():
    f = AffineField.uniform(3, 2).set_blocks(np.diag([1.0, 2.0]), [4.0, 5.0])
    assert np.allclose(f.divergence(np.ones((2, 2)), [0.1, 0.7]), 3.0)
    g = AffineField.uniform(3, 2).set_blocks(0.0, [4.0, 5.0])
    assert np.allclose(g.divergence(np.ones((2, 2)), 0.4), 0.0)


@pytest.mark.parametrize("make", [lambda: rand_affine(), lambda: MlpField(2, 6, seed=3)])
def test_vjp_matches_finite_differences(make):
    f = make()
    if isinstance(f, MlpField):
        f = f.with_params(np.random.default_rng(2).normal(scale=0.5, size=f.n_params))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2))
    t = rng.uniform(0.01, 0.99, 4)
    up = rng.normal(size=(4, 2))
    assert np.allclose(f.vjp_params(x, t, up), numeric_vjp(f, x, t, up), atol=1e-6)
    assert np.all(f.vjp_params(x, t, np.zeros_like(up)) == 0)


def test_affine_vjp_b_block_is_interpolation_weights():
    f = rand_affine(dim=1, knots=3)
    t = np.array([0.25])
    g = f.vjp_params(np.array([[0.7]]), t, np.array([[1.0]]))
    assert np.allclose(g[3:], f.weights(t)[0])


def test_mlp_divergence_exact_vs_differences():
    f = MlpField(3, 8, seed=1)
    f = f.with_params(np.random.default_rng(4).normal(scale=0.4, size=f.n_params))
    x = np.random.default_rng(5).normal(size=(5, 3))
    assert np.allclose(f.divergence(x, 0.3), f.divergence_exact(x, 0.3), atol=1e-6)


def test_divergence_vjp_matches_finite_differences():
    f = rand_affine(dim=2, knots=3)
    x = np.ones((3, 2))
    t = np.array([0.2, 0.5, 0.9])
    up = np.array([1.0, -2.0, 0.5])
    g = f.divergence_vjp_params(x, t, up)
    h = 1e-6
    num = np.empty(f.n_params)
    for j in range(f.n_params):
        p = f.params.copy()
        p[j] += h
        hi = f.with_params(p).divergence(x, t) @ up
        p[j] -= 2 * h
        num[j] = (hi - f.with_params(p).divergence(x, t) @ up) / (2 * h)
    assert np.allclose(g, num, atol=1e-6)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
@settings(max_examples=20, deadline=None)
def test_affine_least_squares_recovery(a, b):
    # regressing onto a·x + b at fixed t recovers the parameters from the vjp normal equations
    f = AffineField(np.array([0.0, 1.0]), 1)
    x = np.linspace(-2, 2, 21)[:, None]
    t = np.zeros(21)
    target = a * x + b
    cols = np.stack([f.vjp_params(x, t, np.eye(21)[i][:, None]) for i in range(21)])
    sol, *_ = np.linalg.lstsq(cols, target[:, 0], rcond=None)
    fitted = f.with_params(sol)
    assert np.allclose(fitted.eval(x, t), target, atol=1e-8)


def test_grad_accumulator_merge():
    a = GradAccumulator(np.zeros(3))
    b = GradAccumulator(np.zeros(3))
    a.add(np.array([1.0, 2.0, 3.0]))
    b.add(np.array([3.0, 2.0, 1.0]), count=3)
    m = a.merge(b)
    assert m.count == 4 and np.allclose(m.mean(), [1.0, 1.0, 1.0])
    with pytest.raises(ModelError):
        a.add(np.zeros(2))
    with pytest.raises(ModelError):
        GradAccumulator(np.zeros(1)).mean()


@pytest.mark.parametrize("make", [lambda: rand_affine(), lambda: MlpField(2, 5, seed=7)])
def test_save_load_roundtrip(tmp_path, make):
    f = make()
    path = tmp_path / "p.bin"
    save_params(f, path, extra={"note": 1})
    g = load_params(path)
    assert type(g) is type(f) and np.array_equal(g.params, f.params)
    x = np.ones((2, 2))
    assert np.array_equal(g.eval(x, 0.4), f.eval(x, 0.4))


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"hello\n")
    with pytest.raises(ModelError):
        load_params(path)


def test_dimension_mismatch():
    with pytest.raises(ModelError):
        rand_affine(dim=2).eval(np.ones((3, 3)), 0.5)
    with pytest.raises(ModelError):
        AffineField(np.array([0.0, 1.0]), 1, np.zeros(3))


def test_zero_field():
    z = zero_field(2)
    assert np.all(z.eval(np.ones((3, 2)), 0.2) == 0) and np.all(z.divergence(np.ones((3, 2)), 0.2) == 0)
