"""Positional encoding, feed-forward, layer norm, dense and unidirectional LSTM.

Each trainable layer has a ``*_forward`` returning ``(output, cache)`` and a
matching ``*_backward`` taking the upstream gradient and that cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .tensor import matmul, sigmoid

LN_EPS = 1e-5


def positional_encoding(start_pos: int, frames: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encodings for absolute positions ``start_pos .. start_pos+frames-1``."""
    if start_pos < 0:
        raise ValueError(f"start_pos must be >= 0, got {start_pos}")
    pos = np.arange(start_pos, start_pos + frames, dtype=np.float64)[:, None]
    pair = np.arange(d_model) // 2
    rates = np.power(10000.0, -(2.0 * pair) / d_model)
    angles = pos * rates[None, :]
    pe = np.where(np.arange(d_model) % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


def pos_encode(x, start_pos: int = 0) -> np.ndarray:
    x = np.asarray(x)
    return x + positional_encoding(start_pos, x.shape[0], x.shape[1], x.dtype)


def dense(x, weight, bias=None) -> np.ndarray:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def dense_backward(dout, x, weight):
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


def layer_norm_forward(x, gain, bias, eps: float = LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(np.asarray(x), gain, bias, eps)[0]


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    dgain = np.sum(dout * xhat, axis=0)
    dbias = dout.sum(axis=0)
    dxhat = dout * gain
    d = xhat.shape[-1]
    dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgain, dbias


def feed_forward_forward(x, w1, b1, w2, b2):
    pre = matmul(x, w1) + b1
    hidden = np.maximum(pre, 0.0)
    return matmul(hidden, w2) + b2, (x, pre, hidden)


def feed_forward(x, w1, b1, w2, b2) -> np.ndarray:
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""
    return feed_forward_forward(np.asarray(x), w1, b1, w2, b2)[0]


def feed_forward_backward(dout, cache, w1, w2):
    x, pre, hidden = cache
    dw2 = hidden.T @ dout
    db2 = dout.sum(axis=0)
    dpre = (dout @ w2.T) * (pre > 0)
    dw1 = x.T @ dpre
    db1 = dpre.sum(axis=0)
    return dpre @ w1.T, dw1, db1, dw2, db2


@dataclass(frozen=True)
class LstmParams:
    """Gate weights stacked as ``[input, forget, candidate, output]`` along the last axis."""

    w_x: np.ndarray  # (input_dim, 4H)
    w_h: np.ndarray  # (H, 4H)
    b: np.ndarray  # (4H,)

    def __post_init__(self):
        h = self.w_h.shape[0]
        if self.w_h.shape != (h, 4 * h) or self.w_x.shape[1] != 4 * h or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM shapes w_x={self.w_x.shape} w_h={self.w_h.shape} b={self.b.shape}")

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]


@dataclass(frozen=True)
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, dtype=np.float64) -> "LstmState":
        return cls(np.zeros(hidden_dim, dtype), np.zeros(hidden_dim, dtype))

    @property
    def nbytes(self) -> int:
        return self.hidden.nbytes + self.cell.nbytes


def _lstm_gates(x_t, h_prev, p: LstmParams):
    z = x_t @ p.w_x
    z += h_prev @ p.w_h
    z += p.b
    n = p.hidden_dim
    sz = sigmoid(z)
    return sz[:n], sz[n:2 * n], np.tanh(z[2 * n:3 * n]), sz[3 * n:]


def lstm_step(x_t, state: LstmState, p: LstmParams):
    x_t = np.asarray(x_t)
    if x_t.shape != (p.input_dim,) or state.hidden.shape != (p.hidden_dim,):
        raise ShapeError(f"LSTM step got x {x_t.shape}, h {state.hidden.shape} for params "
                         f"({p.input_dim} -> {p.hidden_dim})")
    i, f, g, o = _lstm_gates(x_t, state.hidden, p)
    c = f * state.cell + i * g
    h = o * np.tanh(c)
    return h, LstmState(h, c)


def lstm_forward_cached(x, initial: LstmState, p: LstmParams):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise ShapeError(f"LSTM input {x.shape} does not match input_dim {p.input_dim}")
    t_len, n = x.shape[0], p.hidden_dim
    dtype = np.result_type(x.dtype, p.w_x.dtype)
    hs = np.empty((t_len, n), dtype)
    cs = np.empty((t_len, n), dtype)
    sig = np.empty((t_len, 4 * n), dtype)  # sigmoid of all pre-activations; candidate slice unused
    cand = np.empty((t_len, n), dtype)
    w_x, w_h, b = p.w_x, p.w_h, p.b
    h, c = initial.hidden, initial.cell
    for t in range(t_len):
        # row-at-a-time projection keeps results bit-identical however x is split
        z = x[t] @ w_x
        z += h @ w_h
        z += b
        s = sigmoid(z)
        g = np.tanh(z[2 * n:3 * n])
        c = s[n:2 * n] * c + s[:n] * g
        h = s[3 * n:] * np.tanh(c)
        hs[t], cs[t], sig[t], cand[t] = h, c, s, g
    return hs, LstmState(h, c), (x, initial, hs, cs, sig, cand)


def lstm_forward(x, initial: LstmState, p: LstmParams):
    """Run the cell over every row of ``x``; returns ``(outputs, final_state)``."""
    hs, final, _ = lstm_forward_cached(x, initial, p)
    return hs, final


def lstm_backward(dh_seq, cache, p: LstmParams):
    """Backpropagation through time.

    Returns ``(dx, {"w_x", "w_h", "b"}, d_initial_state)`` where the last item
    is a ``(dh0, dc0)`` pair.
    """
    x, initial, hs, cs, sig, cand = cache
    t_len, n = hs.shape
    dz = np.empty((t_len, 4 * n), hs.dtype)
    dh_next = np.zeros(n, hs.dtype)
    dc_next = np.zeros(n, hs.dtype)
    for t in range(t_len - 1, -1, -1):
        i, f, o = sig[t, :n], sig[t, n:2 * n], sig[t, 3 * n:]
        g = cand[t]
        c_prev = cs[t - 1] if t > 0 else initial.cell
        tc = np.tanh(cs[t])
        dh = dh_seq[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[t, :n] = dc * g * i * (1.0 - i)
        dz[t, n:2 * n] = dc * c_prev * f * (1.0 - f)
        dz[t, 2 * n:3 * n] = dc * i * (1.0 - g * g)
        dz[t, 3 * n:] = dh * tc * o * (1.0 - o)
        dh_next = dz[t] @ p.w_h.T
        dc_next = dc * f
    h_prev = np.vstack([initial.hidden[None, :], hs[:-1]]) if t_len else hs
    grads = {"w_x": x.T @ dz, "w_h": h_prev.T @ dz, "b": dz.sum(axis=0)}
    return dz @ p.w_x.T, grads, (dh_next, dc_next)
