import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terranav import nn
from oracles import adam_reference, naive_conv, naive_out_size, numeric_grad, rel_error

SEEDS = range(20)


# conv ---------------------------------------------------------------------- #

def test_paper_scale_conv_shape():
    x = np.zeros((72, 128, 12))
    k = np.zeros((8, 8, 12, 32))
    out = nn.conv2d(x, k, np.zeros(32), stride=4)
    assert out.shape == (17, 31, 32)
    assert out.shape[:2] == (naive_out_size(72, 8, 4), naive_out_size(128, 8, 4))


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(5, 7, 1))
    out = nn.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_shape_exhaustive():
    for h in range(1, 17):
        for w in range(1, 17):
            for k in range(1, min(h, w) + 1):
                for s in range(1, 5):
                    assert nn.conv_output_size(h, k, s) == naive_out_size(h, k, s)
                    assert nn.conv_output_size(w, k, s) == naive_out_size(w, k, s)
    # spot-check the actual kernel across a grid of shapes
    rng = np.random.default_rng(1)
    for h, w, k, s in [(16, 16, 3, 1), (16, 9, 4, 2), (7, 16, 2, 3), (5, 5, 5, 1), (12, 15, 3, 4)]:
        out = nn.conv2d(rng.normal(size=(h, w, 2)), rng.normal(size=(k, k, 2, 3)), np.zeros(3),
                        stride=s)
        assert out.shape == (naive_out_size(h, k, s), naive_out_size(w, k, s), 3)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(9, 11, 3))
    k = rng.normal(size=(3, 4, 3, 5))
    b = rng.normal(size=5)
    for s in (1, 2, 3):
        np.testing.assert_allclose(nn.conv2d(x, k, b, stride=s), naive_conv(x, k, b, s),
                                   rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 2)), np.zeros(3))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    relu = seed % 3 == 0
    x = rng.normal(size=(2, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    w_out = rng.normal(size=nn.conv2d(x, k, b, stride, relu=relu).shape)

    def f():
        return float((nn.conv2d(x, k, b, stride, relu=relu) * w_out).sum())

    out, cache = nn.conv2d_forward(x, k, b, stride, relu=relu)
    dx, dk, db = nn.conv2d_backward(w_out, cache)
    assert dx.shape == x.shape and dk.shape == k.shape and db.shape == b.shape
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dk, numeric_grad(f, k)) < 1e-4
    assert rel_error(db, numeric_grad(f, b)) < 1e-4


def test_conv_backward_without_input_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 5, 1))
    _, cache = nn.conv2d_forward(x, rng.normal(size=(2, 2, 1, 2)), np.zeros(2))
    dx, dk, db = nn.conv2d_backward(np.ones((1, 4, 4, 2)), cache, input_grad=False)
    assert dx is None and dk.shape == (2, 2, 1, 2)


# dense --------------------------------------------------------------------- #

def test_dense_identity_and_bias():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nn.dense(x, np.eye(3), np.zeros(3)), x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(nn.dense(x, np.zeros((3, 2)), b), np.tile(b, (2, 1)))


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    relu = seed % 2 == 0
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    g = rng.normal(size=(3, 4))

    def f():
        return float((nn.dense(x, w, b, relu) * g).sum())

    _, cache = nn.dense_forward(x, w, b, relu)
    dx, dw, db = nn.dense_backward(g, cache)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-4
    assert rel_error(dw, numeric_grad(f, w)) < 1e-4
    assert rel_error(db, numeric_grad(f, b)) < 1e-4


# lstm ---------------------------------------------------------------------- #

def test_lstm_zero_case():
    h, c = nn.lstm_step(np.zeros(3), np.zeros(4), np.zeros(4), np.zeros((7, 16)), np.zeros(16))
    np.testing.assert_array_equal(h, 0)
    np.testing.assert_array_equal(c, 0)


def test_lstm_shapes():
    rng = np.random.default_rng(0)
    h, c = nn.lstm_step(rng.normal(size=16), np.zeros(64), np.zeros(64),
                        rng.normal(size=(80, 256)) * 0.1, np.zeros(256))
    assert h.shape == (64,) and c.shape == (64,)


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    din, dh, n = 3, 4, 2
    x = rng.normal(size=(n, din))
    h = rng.normal(size=(n, dh))
    c = rng.normal(size=(n, dh))
    w = rng.normal(size=(din + dh, 4 * dh)) * 0.5
    b = rng.normal(size=4 * dh) * 0.5
    gh = rng.normal(size=(n, dh))
    gc = rng.normal(size=(n, dh))

    def f():
        hn, cn = nn.lstm_step(x, h, c, w, b)
        return float((hn * gh).sum() + (cn * gc).sum())

    _, _, cache = nn.lstm_step_forward(x, h, c, w, b)
    dx, dh_, dc, dw, db = nn.lstm_step_backward(gh, gc, cache)
    for analytic, arr in ((dx, x), (dh_, h), (dc, c), (dw, w), (db, b)):
        assert analytic.shape == arr.shape
        assert rel_error(analytic, numeric_grad(f, arr)) < 1e-4


# softmax ------------------------------------------------------------------- #

def test_uniform_cross_entropy():
    loss, probs, _ = nn.softmax_cross_entropy(np.zeros(4), np.array(2))
    assert abs(float(loss) - math.log(4)) < 1e-12
    np.testing.assert_allclose(probs, 0.25)


def test_saturated_cross_entropy():
    logits = np.zeros(4)
    logits[1] = 50.0
    loss, _, _ = nn.softmax_cross_entropy(logits, np.array(1))
    assert float(loss) < 1e-9


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(300 + seed)
    logits = rng.normal(size=(3, 5)) * 3
    labels = rng.integers(0, 5, size=3)

    def f():
        return float(nn.softmax_cross_entropy(logits, labels)[0].sum())

    _, _, grad = nn.softmax_cross_entropy(logits, labels)
    assert rel_error(grad, numeric_grad(f, logits)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=8))
def test_softmax_is_probability_vector(values):
    p = nn.softmax(np.array(values))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# dropout ------------------------------------------------------------------- #

def test_dropout_identities():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(nn.dropout(x, 0.0, rng, training=True), x)
    np.testing.assert_array_equal(nn.dropout(x, 0.7, rng, training=False), x)


def test_dropout_survivor_fraction():
    y = nn.dropout(np.ones(100_000), 0.5, np.random.default_rng(5), training=True)
    frac = float((y != 0).mean())
    assert 0.49 <= frac <= 0.51
    np.testing.assert_allclose(y[y != 0], 2.0)


def test_dropout_deterministic_given_seed():
    a = nn.dropout(np.ones(50), 0.3, np.random.default_rng(9), True)
    b = nn.dropout(np.ones(50), 0.3, np.random.default_rng(9), True)
    np.testing.assert_array_equal(a, b)


# adam ---------------------------------------------------------------------- #

def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.0, -2.0])}
    nn.Adam(1e-3).step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.5, 1e-2])
def test_adam_first_step_is_signed_lr(g):
    p = {"w": np.array([0.0])}
    nn.Adam(1e-3).step(p, {"w": np.array([g])})
    assert abs(p["w"][0] - (-1e-3 * math.copysign(1, g))) <= 1e-6 * 1e-3


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(2, 3))
    g = rng.normal(size=(2, 3))
    p = {"w": p0.copy()}
    opt = nn.Adam(learning_rate=0.01)
    expected = adam_reference(p0, [g, g, g], 0.01)
    for t in range(3):
        opt.step(p, {"w": g})
        assert opt.step_count == t + 1
        np.testing.assert_allclose(p["w"], expected[t], rtol=0, atol=1e-12)
    st_ = opt.state_dict()
    assert st_["first_moment"]["w"].shape == p0.shape


def test_adam_rejects_nonfinite_and_mismatched():
    p = {"w": np.zeros(2)}
    opt = nn.Adam()
    with pytest.raises(FloatingPointError):
        opt.step(p, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        opt.step(p, {"w": np.zeros(3)})
    assert opt.step_count == 0
