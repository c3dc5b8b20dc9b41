import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from concurl.nn import (MLP, SGD, DegenerateEmbeddingError, NonFiniteError, init_encoder, init_head,
                        l2_normalize, normalize_rows, normalize_rows_backward, sgd_step)

from conftest import fd_grad, rel_err


def test_forward_shapes(rng):
    enc = init_encoder(7, (64,), 128, rng)
    out, _ = enc.forward(rng.normal(size=(5, 7)))
    assert out.shape == (5, 128)
    head = init_head(128, 256, 64, rng)
    z, _ = head.forward(out)
    assert z.shape == (5, 64)


def test_forward_matches_straight_line_numpy(rng):
    enc = init_encoder(4, (6, 3), 5, rng)
    x = rng.normal(size=(9, 4))
    p = enc.params
    h = np.maximum(x @ p["enc.0.W"] + p["enc.0.b"], 0)
    h = np.maximum(h @ p["enc.1.W"] + p["enc.1.b"], 0)
    ref = h @ p["enc.2.W"] + p["enc.2.b"]
    out, _ = enc.forward(x)
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_wrong_input_dim(rng):
    enc = init_encoder(4, (6,), 5, rng)
    with pytest.raises(ValueError):
        enc.forward(np.zeros((3, 5)))


def test_init_scale():
    enc = init_encoder(400, (300,), 10, np.random.default_rng(0))
    W = enc.params["enc.0.W"]
    assert abs(W.std() * np.sqrt(400) - 1) < 0.02
    assert np.all(enc.params["enc.0.b"] == 0)


@pytest.mark.parametrize("standardize", [False, True])
def test_mlp_backward_fd(rng, standardize):
    mlp = MLP.init("m", [4, 7, 3], rng, standardize=standardize)
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))

    def loss():
        out, _ = mlp.forward(x)
        return 0.5 * ((out - target) ** 2).sum()

    out, cache = mlp.forward(x)
    gx, grads = mlp.backward(out - target, cache)
    for name, g in grads.items():
        assert rel_err(g, fd_grad(loss, mlp.params[name])) <= 1e-4, name
    assert rel_err(gx, fd_grad(loss, x)) <= 1e-4


def test_normalize_rows_backward_fd(rng):
    v = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))

    def loss():
        u, _ = normalize_rows(v)
        return float((u * w).sum())

    u, n = normalize_rows(v)
    assert rel_err(normalize_rows_backward(w, u, n), fd_grad(loss, v)) <= 1e-6


def test_normalize_zero_raises():
    with pytest.raises(DegenerateEmbeddingError):
        l2_normalize(np.zeros(3))
    with pytest.raises(DegenerateEmbeddingError, match="row 1"):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3).filter(lambda t: abs(t) > 1e-3)))
def test_normalize_unit_rows(v):
    u = l2_normalize(v, axis=1)
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)


def test_sgd_quadratic_closed_form():
    # f(p) = a/2 (p - m)^2; plain gradient descent contracts by (1 - lr a) each step
    a, m, lr = 3.0, 2.0, 0.1
    p = {"w": np.array([10.0])}
    opt = SGD(momentum=0.0)
    prev = abs(p["w"][0] - m)
    for t in range(1, 40):
        opt.step(p, {"w": a * (p["w"] - m)}, lr)
        gap = abs(p["w"][0] - m)
        assert gap < prev
        assert np.isclose(gap, 8.0 * (1 - lr * a) ** t, rtol=1e-12)
        prev = gap


def test_sgd_momentum_reference():
    # hand-unrolled momentum recursion with coupled weight decay
    p0, g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.25]), np.array([-1.0, 2.0])
    mu, wd, lr = 0.9, 0.01, 0.1
    params = {"w": p0.copy()}
    opt = SGD(mu, wd)
    opt.step(params, {"w": g1}, lr)
    v1 = g1 + wd * p0
    p1 = p0 - lr * v1
    assert np.array_equal(params["w"], p1)
    opt.step(params, {"w": g2}, lr)
    v2 = mu * v1 + g2 + wd * p1
    assert np.allclose(params["w"], p1 - lr * v2, rtol=0, atol=1e-15)


def test_sgd_zero_lr_noop():
    p = {"w": np.array([1.0, 2.0])}
    before = p["w"].copy()
    SGD(0.9, 0.1).step(p, {"w": np.array([3.0, -1.0])}, 0.0)
    assert np.array_equal(p["w"], before)


def test_sgd_skips_blocks_without_grad():
    p = {"a": np.ones(2), "b": np.ones(2)}
    SGD(0.9, 0.5).step(p, {"a": np.ones(2)}, 0.1)
    assert np.array_equal(p["b"], np.ones(2))


def test_sgd_rejects_nonfinite():
    p = {"w": np.ones(2)}
    with pytest.raises(NonFiniteError, match="'w'"):
        SGD().step(p, {"w": np.array([np.nan, 0.0])}, 0.1)
    assert np.array_equal(p["w"], np.ones(2))


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        SGD().step({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1)


def test_sgd_step_functional():
    params = {"w": np.array([1.0])}
    out = sgd_step(params, {"w": np.array([2.0])}, 0.5)
    assert out["w"][0] == 0.0 and params["w"][0] == 1.0
