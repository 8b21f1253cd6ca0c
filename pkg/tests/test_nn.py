import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loglm import nn

from helpers import assert_grads_match


def _scalar_params(w=1.0):
    return nn.LstmParameters(np.full((1, 4), w), np.zeros((1, 4)), np.zeros(4))


def test_zero_params_give_zero_state():
    p = nn.LstmParameters(np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(8))
    state, (g, f, i, o) = nn.lstm_step(p, np.ones(3), nn.LstmState.zeros(2))
    assert np.all(state.h == 0) and np.all(state.c == 0)
    assert np.all(f == 0.5) and np.all(i == 0.5) and np.all(o == 0.5) and np.all(g == 0)


def test_scalar_step_against_hand_values():
    state, (g, f, i, o) = nn.lstm_step(_scalar_params(), np.array([1.0]), nn.LstmState.zeros(1))
    sig = 1.0 / (1.0 + math.exp(-1.0))
    c = sig * math.tanh(1.0)
    h = sig * math.tanh(c)
    assert g[0] == pytest.approx(math.tanh(1.0), abs=1e-12)
    assert i[0] == pytest.approx(sig, abs=1e-12)
    assert state.c[0] == pytest.approx(c, abs=1e-12)
    assert state.h[0] == pytest.approx(h, abs=1e-12)
    # frozen values
    assert (g[0], i[0], state.c[0], state.h[0]) == pytest.approx((0.76159, 0.73106, 0.55677, 0.36961), abs=1e-5)


def test_step_is_deterministic_and_rejects_non_finite():
    p = nn.init_parameters(0, 3, 4)
    x = np.array([0.1, -0.2, 0.3])
    a, _ = nn.lstm_step(p, x, nn.LstmState.zeros(4))
    b, _ = nn.lstm_step(p, x, nn.LstmState.zeros(4))
    assert np.array_equal(a.h, b.h) and np.array_equal(a.c, b.c)
    with pytest.raises(nn.NonFiniteError):
        nn.lstm_step(p, np.array([np.nan, 0, 0]), nn.LstmState.zeros(4))


def test_sequence_forward_matches_repeated_steps():
    p = nn.init_parameters(1, 3, 5)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2, 6, 3))
    lengths = np.array([6, 4])
    mask = np.arange(6)[None] < lengths[:, None]
    H, _ = nn.lstm_forward(p, X, mask)
    for b in range(2):
        s = nn.LstmState.zeros(5)
        for t in range(lengths[b]):
            s, _ = nn.lstm_step(p, X[b, t], s)
            np.testing.assert_allclose(H[b, t], s.h, atol=1e-13)
        assert np.all(H[b, lengths[b]:] == 0)


def test_reverse_pass_starts_at_the_true_end():
    p = nn.init_parameters(2, 3, 4)
    X = np.random.default_rng(2).normal(size=(1, 5, 3))
    padded = np.concatenate([X, np.ones((1, 3, 3))], axis=1)
    mask_a = np.ones((1, 5), bool)
    mask_b = np.arange(8)[None] < 5
    Ha, _ = nn.lstm_forward(p, X, mask_a, reverse=True)
    Hb, _ = nn.lstm_forward(p, padded, mask_b, reverse=True)
    np.testing.assert_allclose(Ha[0], Hb[0, :5], atol=1e-14)


def test_forward_states_ignore_future_inputs():
    p = nn.init_parameters(3, 2, 4)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(1, 7, 2))
    mask = np.ones((1, 7), bool)
    H, _ = nn.lstm_forward(p, X, mask)
    Y = X.copy()
    Y[0, 4:] = rng.normal(size=(3, 2))
    H2, _ = nn.lstm_forward(p, Y, mask)
    assert np.array_equal(H[0, :4], H2[0, :4])


def test_lstm_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = nn.init_parameters(4, 3, 4)
    params = {"l.Wx": p.Wx, "l.Wh": p.Wh, "l.b": p.b}
    X = rng.normal(size=(2, 5, 3))
    mask = np.arange(5)[None] < np.array([[5], [3]])
    G = rng.normal(size=(2, 5, 4))

    def loss():
        H, _ = nn.lstm_forward(nn.LstmParameters.from_dict(params, "l."), X, mask)
        return float((H * G).sum())

    H, cache = nn.lstm_forward(p, X, mask)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    nn.lstm_backward(p, cache, G, grads, "l.")
    assert_grads_match(loss, params, grads, tol=1e-6)


def test_gates_are_stored_in_named_blocks():
    p = nn.init_parameters(0, 3, 4)
    Wx_f, _, b_f = p.gate("f")
    assert Wx_f.shape == (3, 4)
    assert np.all(b_f == 1.0)
    assert np.all(p.gate("i")[2] == 0.0)


# -- softmax and loss -------------------------------------------------------


def test_softmax_uniform_and_extreme():
    assert np.allclose(nn.softmax(np.zeros(64)), 1 / 64)
    p = nn.softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] >= 0


def test_softmax_matches_naive_oracle():
    z = np.random.default_rng(5).normal(size=(20, 11))
    naive = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(nn.softmax(z), naive, atol=1e-12)
    np.testing.assert_allclose(nn.log_softmax(z), np.log(naive), atol=1e-12)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e4, 1e4)))
def test_softmax_sums_to_one(z):
    p = nn.softmax(z)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_softmax_project_shapes():
    rng = np.random.default_rng(6)
    p = nn.softmax_project(rng.normal(size=(4, 3)), rng.normal(size=(3, 9)), np.zeros(9))
    assert p.shape == (4, 9)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_sequence_loss_cases():
    targets = np.array([3, 5, 2])
    perfect = np.zeros((3, 8))
    perfect[np.arange(3), targets] = 1.0
    assert nn.sequence_loss(perfect, targets) == 0.0
    uniform = np.full((3, 64), 1 / 64)
    assert nn.sequence_loss(uniform, targets) == pytest.approx(math.log(64), abs=1e-12)


def test_sequence_loss_random_oracle_and_padding():
    rng = np.random.default_rng(7)
    probs = nn.softmax(rng.normal(size=(6, 10)))
    targets = rng.integers(1, 10, size=6)
    oracle = -sum(math.log(probs[t, targets[t]]) for t in range(6)) / 6
    assert nn.sequence_loss(probs, targets) == pytest.approx(oracle, abs=1e-12)
    padded_targets = np.r_[targets, 0, 0]
    padded_probs = np.vstack([probs, nn.softmax(rng.normal(size=(2, 10)))])
    assert nn.sequence_loss(padded_probs, padded_targets) == pytest.approx(oracle, abs=1e-12)


# -- init, Adam, checkpoints ------------------------------------------------


def test_init_bounds_and_seeding():
    a = nn.init_parameters(11, 30, 64)
    b = nn.init_parameters(11, 30, 64)
    c = nn.init_parameters(12, 30, 64)
    assert np.array_equal(a.Wx, b.Wx) and np.array_equal(a.Wh, b.Wh)
    assert not np.array_equal(a.Wx, c.Wx)
    assert np.abs(a.Wx).max() <= math.sqrt(6 / (30 + 64))
    assert np.abs(a.Wh).max() <= math.sqrt(6 / (64 + 64))
    assert np.all(a.gate("f")[2] == 1.0)


def test_adam_zero_gradient_is_a_no_op():
    params = {"w": np.array([1.0, -2.0])}
    nn.Adam().step(params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_against_hand_update():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -0.01, 2.0])
    opt = nn.Adam(lr=1e-3, clip=None)
    opt.step(params, {"w": g})
    m = 0.1 * g / (1 - 0.9)
    v = 0.001 * g * g / (1 - 0.999)
    expected = np.array([1.0, -2.0, 0.5]) - 1e-3 * m / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, rtol=1e-6, atol=1e-12)
    # first update has magnitude ~lr per coordinate
    np.testing.assert_allclose(np.abs(params["w"] - [1.0, -2.0, 0.5]), 1e-3, rtol=1e-4)


def test_adam_clips_global_norm():
    g = {"a": np.array([30.0, 0.0]), "b": np.array([40.0])}  # norm 50
    clipped = {"a": np.zeros(2), "b": np.zeros(1)}
    scaled = {"a": np.zeros(2), "b": np.zeros(1)}
    nn.Adam(clip=5.0).step(clipped, g)
    nn.Adam(clip=None).step(scaled, {k: v * 0.1 for k, v in g.items()})
    for k in g:
        np.testing.assert_allclose(clipped[k], scaled[k], rtol=1e-12)
    assert nn.global_norm({k: v * 0.1 for k, v in g.items()}) == pytest.approx(5.0)


def test_adam_skips_non_finite_gradients():
    params = {"w": np.ones(2)}
    opt = nn.Adam()
    assert opt.step(params, {"w": np.array([np.inf, 1.0])}) is False
    assert opt.skipped == 1 and opt.t == 0
    assert np.array_equal(params["w"], np.ones(2))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    p = nn.init_parameters(9, 3, 4)
    params = {"l.Wx": p.Wx, "l.Wh": p.Wh, "l.b": p.b}
    opt = nn.Adam(lr=2e-3)
    opt.step(params, {k: np.ones_like(v) for k, v in params.items()})
    path = tmp_path / "ck.npz"
    nn.save_checkpoint(path, params, {"note": "x"}, opt, {"s": np.arange(3.0)})
    back, meta, opt2, extra = nn.load_checkpoint(path)
    assert meta["note"] == "x"
    for k in params:
        assert np.array_equal(back[k], params[k])
        assert np.array_equal(opt2.m[k], opt.m[k]) and np.array_equal(opt2.v[k], opt.v[k])
    assert opt2.t == 1 and opt2.lr == 2e-3
    assert np.array_equal(extra["s"], np.arange(3.0))
