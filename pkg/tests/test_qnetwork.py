from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agghrl.config import Config
from agghrl.nn import DenseParams, GruParams, finite_diff_check
from agghrl.qnet import (
    MASKED,
    QNetworkParams,
    apply_constraint_mask,
    dueling_combine,
    masked_argmax,
    q_backward_seq,
    q_forward,
    q_forward_seq,
)


def _zero_net(state_dim=5, n=4, hidden=3, rnn=2):
    return QNetworkParams(DenseParams.zeros(state_dim, hidden), GruParams.zeros(hidden, rnn),
                          DenseParams.zeros(rnn, 1), DenseParams.zeros(rnn, n))


def test_zero_network_outputs_zero_q():
    q, h = q_forward(np.ones(5), np.zeros(2), _zero_net())
    assert not q.any() and not h.any()


def test_output_widths_match_option_and_action_spaces():
    nn = Config().nn
    rng = np.random.default_rng(0)
    sel = QNetworkParams.init(rng, 48, 4, nn.selector_hidden, nn.selector_rnn)
    pre = QNetworkParams.init(rng, 56, 3, nn.presenter_hidden, nn.presenter_rnn)
    assert q_forward(np.zeros(48), sel.zero_hidden(), sel)[0].shape == (4,)
    assert q_forward(np.zeros(56), pre.zero_hidden(), pre)[0].shape == (3,)
    assert (sel.hidden.n_out, sel.rnn_width, pre.hidden.n_out, pre.rnn_width) == (28, 16, 24, 12)


def test_width_mismatch_raises():
    net = _zero_net()
    with pytest.raises(ValueError):
        q_forward(np.ones(6), np.zeros(2), net)


def test_dueling_examples():
    assert not dueling_combine(0.0, np.zeros(3)).any()
    assert np.array_equal(dueling_combine(1.0, np.array([2.0, 0.0])), [2.0, 0.0])
    assert np.allclose(dueling_combine(-0.5, np.array([1.0, 2.0, 3.0])), [-1.5, -0.5, 0.5], rtol=0, atol=1e-15)


@given(st.floats(-10, 10), arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(-100, 100))
def test_dueling_invariant_to_advantage_shift(v, a, c):
    assert np.allclose(dueling_combine(v, a + c), dueling_combine(v, a), rtol=0, atol=1e-9)


def test_constraint_mask_examples():
    q = np.array([1.0, 2.0, 3.0])
    assert masked_argmax(q, np.array([True, False, True])) == 2
    assert np.array_equal(apply_constraint_mask(q, np.ones(3, bool)), q)
    masked = apply_constraint_mask(q, np.array([True, False, True]))
    assert masked[1] == MASKED and np.isfinite(masked).all()
    with pytest.raises(ValueError):
        apply_constraint_mask(q, np.zeros(3, bool))


@given(arrays(np.float64, 6, elements=st.floats(-1e6, 1e6)), arrays(bool, 6))
def test_masked_argmax_always_legal(q, mask):
    if not mask.any():
        return
    assert mask[masked_argmax(q, mask)]


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=4, unique=True), st.integers(-1000, 1000))
def test_argmax_shift_invariant(vals, c):
    q = np.array(vals, dtype=np.float64) / 8.0
    c = c / 8.0
    mask = np.array([True, False, True, True])
    assert masked_argmax(q, mask) == masked_argmax(q + c, mask)


def test_forward_deterministic_and_matches_sequence():
    rng = np.random.default_rng(1)
    net = QNetworkParams.init(rng, 10, 3, 6, 4)
    xs = rng.normal(size=(5, 10))
    h = net.zero_hidden()
    steps = []
    for x in xs:
        q, h = q_forward(x, h, net)
        steps.append(q)
    q_seq, h_last, _ = q_forward_seq(xs[:, None, :], net)
    assert np.allclose(np.array(steps), q_seq[:, 0], rtol=0, atol=1e-13)
    assert np.allclose(h, h_last[0], rtol=0, atol=1e-13)
    again, _ = q_forward(xs[0], net.zero_hidden(), net)
    assert again.tobytes() == q_forward(xs[0], net.zero_hidden(), net)[0].tobytes()


def test_last_k_forward_equals_tail_of_full():
    rng = np.random.default_rng(2)
    net = QNetworkParams.init(rng, 7, 3, 5, 4)
    x = rng.normal(size=(6, 4, 7))
    full, _, _ = q_forward_seq(x, net)
    tail, _, _ = q_forward_seq(x, net, last=2)
    assert np.array_equal(full[-2:], tail)


def _full_net_check(seed: int, state_dim: int, n: int, hidden: int, rnn: int, last=None) -> float:
    rng = np.random.default_rng(seed)
    net = QNetworkParams.init(rng, state_dim, n, hidden, rnn)
    T, B = 3, 2
    x = rng.normal(size=(T, B, state_dim))
    mask = np.ones((T, B))
    mask[0, 1] = 0.0
    k = T if last is None else last
    c = rng.normal(size=(k, B, n))

    def f():
        return float(np.sum(c * q_forward_seq(x, net, mask, last=last)[0]))

    _, _, cache = q_forward_seq(x, net, mask, last=last)
    return finite_diff_check(f, net.tensors(), q_backward_seq(c, cache, net))


@pytest.mark.parametrize("shape", [(48, 4, 28, 16), (56, 3, 24, 12)])
def test_full_network_gradients(shape):
    assert _full_net_check(0, *shape) <= 1e-4


def test_partial_output_gradients():
    assert _full_net_check(1, 9, 3, 5, 4, last=2) <= 1e-4


def test_degenerate_linear_network_gradients():
    rng = np.random.default_rng(3)
    net = QNetworkParams.init(rng, 4, 2, None, None)
    x = rng.normal(size=(1, 3, 4))
    c = rng.normal(size=(1, 3, 2))

    def f():
        return float(np.sum(c * q_forward_seq(x, net)[0]))

    _, _, cache = q_forward_seq(x, net)
    assert finite_diff_check(f, net.tensors(), q_backward_seq(c, cache, net)) <= 1e-6


def test_flatten_makes_views_and_preserves_values():
    rng = np.random.default_rng(4)
    net = QNetworkParams.init(rng, 6, 3, 4, 2)
    before = {k: v.copy() for k, v in net.tensors().items()}
    flat = net.flatten()
    for k, v in net.tensors().items():
        assert np.array_equal(v, before[k])
        assert np.shares_memory(v, flat)
    flat[:] = 0.0
    assert not any(v.any() for v in net.tensors().values())


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 100_000))
def test_full_network_gradients_random_seeds(seed):
    assert _full_net_check(seed, 12, 4, 6, 5) <= 1e-4
