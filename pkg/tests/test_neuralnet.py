from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agghrl.nn import (
    MLP,
    DenseParams,
    GruParams,
    RMSPropState,
    dense_backward,
    dense_forward,
    finite_diff_check,
    gru_sequence,
    gru_sequence_backward,
    gru_step,
    huber,
    leaky_relu,
    leaky_relu_grad,
    rmsprop_update,
    rmsprop_update_flat,
)


def test_dense_identity_and_example():
    p = DenseParams(np.eye(3), np.zeros(3))
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(dense_forward(x, p), x)
    p = DenseParams(np.array([[1.0, 2.0]]), np.array([3.0]))
    assert np.array_equal(dense_forward(np.array([1.0, 1.0]), p), [6.0])


def test_dense_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dense_forward(np.ones(4), DenseParams.zeros(3, 2))


def test_dense_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    p = DenseParams.init(rng, 8, 8)
    x = rng.normal(size=(5, 8))
    c = rng.normal(size=(5, 8))

    def f():
        return float(np.sum(c * dense_forward(x, p)))

    gx, grads = dense_backward(x, c, p)
    assert finite_diff_check(f, p.tensors(), grads, floor=1e-8) <= 1e-6
    assert finite_diff_check(f, {"x": x}, {"x": gx}, floor=1e-8) <= 1e-6


def test_leaky_relu_examples():
    assert np.array_equal(leaky_relu(np.array([1.0, -1.0]), 0.01), [1.0, -0.01])
    assert np.array_equal(leaky_relu(np.array([0.0])), [0.0])


def test_leaky_relu_negative_side_derivative_is_slope():
    x = np.array([-0.7])
    h = 1e-6
    num = (leaky_relu(x + h, 0.2) - leaky_relu(x - h, 0.2)) / (2 * h)
    assert num[0] == pytest.approx(0.2, rel=1e-9)
    assert leaky_relu_grad(x, 0.2)[0] == 0.2


def test_gru_zero_weights_halves_state():
    p = GruParams.zeros(4, 3)
    h_prev = np.array([1.0, -2.0, 0.5])
    assert np.allclose(gru_step(np.ones(4), h_prev, p), 0.5 * h_prev, rtol=0, atol=1e-15)
    assert not gru_step(np.ones(4), np.zeros(3), p).any()


def test_gru_width_mismatch_raises():
    with pytest.raises(ValueError):
        gru_step(np.ones(5), np.zeros(3), GruParams.zeros(4, 3))


def test_gru_sequence_agrees_with_step():
    rng = np.random.default_rng(1)
    p = GruParams.init(rng, 6, 12)
    w = rng.normal(size=(4, 3, 6))
    hs, _ = gru_sequence(w, p)
    h = np.zeros((3, 12))
    for t in range(4):
        h = gru_step(w[t], h, p)
        assert np.allclose(hs[t], h, rtol=0, atol=1e-13)


def test_gru_sequence_masked_steps_carry_state():
    rng = np.random.default_rng(2)
    p = GruParams.init(rng, 5, 4)
    w = rng.normal(size=(3, 2, 5))
    mask = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    hs, _ = gru_sequence(w, p, mask)
    assert not hs[0, 0].any()
    h = gru_step(w[1, 0], np.zeros(4), p)
    assert np.allclose(hs[1, 0], h, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gru_bptt_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = GruParams.init(rng, 7, 12)
    w = rng.normal(size=(3, 2, 7))
    c = rng.normal(size=(3, 2, 12))
    h0 = rng.normal(size=(2, 12)) * 0.3

    def f():
        hs, _ = gru_sequence(w, p, h0=h0)
        return float(np.sum(c * hs))

    _, cache = gru_sequence(w, p, h0=h0)
    dw, grads, dh0 = gru_sequence_backward(c, cache, p)
    assert finite_diff_check(f, p.tensors(), grads) <= 1e-4
    assert finite_diff_check(f, {"w": w, "h0": h0}, {"w": dw, "h0": dh0}) <= 1e-4


def test_huber_examples():
    assert huber(0.0, 1.0) == (0.0, 0.0)
    assert huber(0.5, 1.0) == (0.125, 0.5)
    assert huber(10.0, 1.0) == (9.5, 1.0)
    assert huber(-10.0, 1.0) == (9.5, -1.0)
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


@given(st.floats(0.05, 10.0))
def test_huber_continuous_at_threshold(t):
    e = 1e-9 * t
    for sign in (1.0, -1.0):
        lo, glo = huber(sign * (t - e), t)
        hi, ghi = huber(sign * (t + e), t)
        assert abs(lo - hi) < 1e-6 * max(1.0, t * t)
        assert abs(glo - ghi) < 1e-6 * max(1.0, t)


def test_rmsprop_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, 2.0])}
    rmsprop_update(p, {"w": np.zeros(2)}, RMSPropState(), lr=0.1)
    assert np.array_equal(p["w"], [1.0, 2.0])


def test_rmsprop_lr_zero_is_identity():
    p = {"w": np.array([1.0, -2.0])}
    rmsprop_update(p, {"w": np.array([3.0, 4.0])}, RMSPropState(), lr=0.0)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = {"w": np.zeros(1)}
    st_ = RMSPropState()
    lr = 1e-2
    prev = 0.0
    for _ in range(1000):
        rmsprop_update(p, {"w": np.array([2.0])}, st_, lr=lr)
        move = prev - p["w"][0]
        prev = p["w"][0]
    assert move == pytest.approx(lr, rel=0.01)
    assert st_.step == 1000


def test_rmsprop_nonfinite_gradient_skips():
    p = {"w": np.ones(2)}
    st_ = RMSPropState()
    assert rmsprop_update(p, {"w": np.array([np.nan, 1.0])}, st_, lr=0.1) is False
    assert np.array_equal(p["w"], [1.0, 1.0]) and st_.step == 0


def test_rmsprop_flat_matches_dict_version():
    rng = np.random.default_rng(0)
    a = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
    flat = np.concatenate([v.ravel() for v in a.values()])
    sa, sf = RMSPropState(), RMSPropState()
    for _ in range(5):
        g = {"x": rng.normal(size=3), "y": rng.normal(size=(2, 2))}
        rmsprop_update(a, g, sa, 0.01)
        rmsprop_update_flat(flat, np.concatenate([v.ravel() for v in g.values()]), sf, 0.01)
    assert np.allclose(flat, np.concatenate([v.ravel() for v in a.values()]), rtol=0, atol=1e-15)


def test_finite_diff_check_linear_and_negative_control():
    rng = np.random.default_rng(3)
    w = rng.normal(size=5)
    c = rng.normal(size=5)

    def f():
        return float(c @ w)

    assert finite_diff_check(f, {"w": w}, {"w": c.copy()}) <= 1e-9
    bad = c.copy()
    bad[2] += 0.5
    assert finite_diff_check(f, {"w": w}, {"w": bad}) > 1e-2


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    mlp = MLP(rng, [6, 5, 5, 2])
    x = rng.normal(size=(4, 6))
    c = rng.normal(size=(4, 2))

    def f():
        return float(np.sum(c * mlp.forward(x)[0]))

    _, cache = mlp.forward(x)
    assert finite_diff_check(f, mlp.tensors(), mlp.backward(cache, c)) <= 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6))
def test_gru_gradients_property(seed, T, B, n_in, H):
    rng = np.random.default_rng(seed)
    p = GruParams.init(rng, n_in, H)
    w = rng.normal(size=(T, B, n_in))
    c = rng.normal(size=(T, B, H))

    def f():
        return float(np.sum(c * gru_sequence(w, p)[0]))

    _, cache = gru_sequence(w, p)
    _, grads, _ = gru_sequence_backward(c, cache, p)
    assert finite_diff_check(f, p.tensors(), grads) <= 1e-4


def test_finite_diff_check_sampled_entries_catch_bad_tensor():
    rng = np.random.default_rng(5)
    w = rng.normal(size=50)
    c = rng.normal(size=50)

    def f():
        return float(c @ w)

    assert finite_diff_check(f, {"w": w}, {"w": c.copy()}, sample=5) <= 1e-9
    assert finite_diff_check(f, {"w": w}, {"w": c + 1.0}, sample=5, rng=np.random.default_rng(1)) > 1e-2
