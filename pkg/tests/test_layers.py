import numpy as np
import pytest
from oracles import central_difference, layer_norm_definition, lstm_scalar, sinusoid_definition

from streamkws.exceptions import ShapeError
from streamkws.layers import (LstmParams, LstmState, dense, dense_backward, feed_forward_backward,
                              feed_forward_forward, layer_norm_backward, layer_norm_forward, lstm_backward,
                              lstm_forward, lstm_forward_cached, lstm_step, positional_encoding, pos_encode)


def _lstm(rng, n_in=3, hidden=4, scale=0.5):
    return LstmParams(rng.normal(scale=scale, size=(n_in, 4 * hidden)),
                      rng.normal(scale=scale, size=(hidden, 4 * hidden)),
                      rng.normal(scale=scale, size=4 * hidden))


def test_positional_encoding_matches_definition():
    pe = positional_encoding(5, 3, 6)
    for r in range(3):
        np.testing.assert_allclose(pe[r], sinusoid_definition(5 + r, 6), atol=1e-12)


def test_positional_encoding_offsets_concatenate():
    np.testing.assert_array_equal(positional_encoding(0, 10, 8)[4:], positional_encoding(4, 6, 8))
    with pytest.raises(ValueError):
        positional_encoding(-1, 2, 4)
    x = np.zeros((2, 4))
    np.testing.assert_array_equal(pos_encode(x, 3), positional_encoding(3, 2, 4))


def test_layer_norm_definition_and_gradient():
    rng = np.random.default_rng(0)
    x, gain, bias = rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=5)
    out, cache = layer_norm_forward(x, gain, bias)
    np.testing.assert_allclose(out, layer_norm_definition(x, gain, bias), atol=1e-12)
    dout = rng.normal(size=(4, 5))
    dx, dgain, dbias = layer_norm_backward(dout, cache)
    loss = lambda: float(np.sum(layer_norm_forward(x, gain, bias)[0] * dout))  # noqa: E731
    np.testing.assert_allclose(dx, central_difference(loss, x), atol=1e-7)
    np.testing.assert_allclose(dgain, central_difference(loss, gain), atol=1e-7)
    np.testing.assert_allclose(dbias, central_difference(loss, bias), atol=1e-7)


def test_dense_and_ffn_gradients():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    dout = rng.normal(size=(3, 2))
    dx, dw, db = dense_backward(dout, x, w)
    loss = lambda: float(np.sum(dense(x, w, b) * dout))  # noqa: E731
    np.testing.assert_allclose(dx, central_difference(loss, x), atol=1e-7)
    np.testing.assert_allclose(dw, central_difference(loss, w), atol=1e-7)
    np.testing.assert_allclose(db, central_difference(loss, b), atol=1e-7)

    w1, b1 = rng.normal(size=(4, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 4)), rng.normal(size=4)
    dout = rng.normal(size=(3, 4))
    out, cache = feed_forward_forward(x, w1, b1, w2, b2)
    grads = feed_forward_backward(dout, cache, w1, w2)
    loss = lambda: float(np.sum(feed_forward_forward(x, w1, b1, w2, b2)[0] * dout))  # noqa: E731
    for g, arr in zip(grads, (x, w1, b1, w2, b2)):
        np.testing.assert_allclose(g, central_difference(loss, arr), atol=1e-6)


def test_lstm_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    p = _lstm(rng)
    x = rng.normal(size=(5, 3))
    h0, c0 = rng.normal(size=4), rng.normal(size=4)
    hs, final = lstm_forward(x, LstmState(h0, c0), p)
    ref, h_ref, c_ref = lstm_scalar(x, p.w_x, p.w_h, p.b, h0, c0)
    np.testing.assert_allclose(hs, ref, atol=1e-12)
    np.testing.assert_allclose(final.cell, c_ref, atol=1e-12)
    h, state = lstm_step(x[0], LstmState(h0, c0), p)
    np.testing.assert_allclose(h, ref[0], atol=1e-12)


def test_lstm_state_carry_is_bit_exact_across_splits():
    rng = np.random.default_rng(3)
    p = _lstm(rng)
    x = rng.normal(size=(9, 3))
    whole, _ = lstm_forward(x, LstmState.zeros(4), p)
    a, st = lstm_forward(x[:4], LstmState.zeros(4), p)
    b, _ = lstm_forward(x[4:], st, p)
    np.testing.assert_array_equal(whole, np.vstack([a, b]))


def test_lstm_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    p = _lstm(rng)
    x = rng.normal(size=(6, 3))
    h0, c0 = rng.normal(size=4), rng.normal(size=4)
    dh = rng.normal(size=(6, 4))

    def loss():
        return float(np.sum(lstm_forward(x, LstmState(h0, c0), p)[0] * dh))

    _, _, cache = lstm_forward_cached(x, LstmState(h0, c0), p)
    dx, grads, (dh0, dc0) = lstm_backward(dh, cache, p)
    np.testing.assert_allclose(dx, central_difference(loss, x), atol=1e-7)
    for name in ("w_x", "w_h", "b"):
        np.testing.assert_allclose(grads[name], central_difference(loss, getattr(p, name)), atol=1e-7)
    np.testing.assert_allclose(dh0, central_difference(loss, h0), atol=1e-7)
    np.testing.assert_allclose(dc0, central_difference(loss, c0), atol=1e-7)


def test_lstm_shape_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        LstmParams(np.zeros((3, 8)), np.zeros((2, 7)), np.zeros(8))
    with pytest.raises(ShapeError):
        lstm_forward(np.zeros((2, 5)), LstmState.zeros(4), _lstm(rng))
    assert LstmState.zeros(4, np.float32).nbytes == 32
