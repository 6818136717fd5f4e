"""Multi-head self-attention: full, block-masked and incremental block streaming.

Frames are 1-based in the windowing helpers (``block_of``, ``build_mask``) to
keep the index arithmetic readable; arrays are 0-based as usual.

Block geometry with shift ``S`` and block size ``2S``:

* block 1 holds queries 1..2S and attends keys 1..2S;
* block i >= 2 holds queries iS+1..(i+1)S and attends keys (i-1)S+1..(i+1)S.

Running the blocks one at a time with a cache of the previous ``S`` layer
inputs gives the same numbers as a single masked pass over the whole sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .tensor import row_softmax


@dataclass(frozen=True)
class BlockSpec:
    shift: int

    def __post_init__(self):
        if int(self.shift) < 1:
            raise ValueError(f"block shift must be >= 1, got {self.shift}")

    @property
    def block(self) -> int:
        return 2 * self.shift


@dataclass(frozen=True)
class AttentionProjections:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ShapeError(f"d_model {d} is not divisible by n_heads {self.n_heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class AttentionMask:
    frames: int
    spec: BlockSpec
    allowed: np.ndarray

    def to_text(self) -> str:
        return "\n".join("".join("#" if a else "." for a in row) for row in self.allowed)


@dataclass
class LayerCache:
    """Last ``shift`` attention inputs of one layer (pre-projection rows)."""

    spec: BlockSpec
    inputs: np.ndarray = field(default=None)
    blocks: int = 0
    closed: bool = False

    @property
    def valid_len(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[0]

    @property
    def nbytes(self) -> int:
        return 0 if self.inputs is None else self.inputs.nbytes


def block_of(t: int, spec: BlockSpec) -> int:
    """1-based block index of 1-based frame ``t``."""
    if t < 1:
        raise ValueError(f"frame index must be >= 1, got {t}")
    s = spec.shift
    if t <= 2 * s:
        return 1
    return -(-t // s) - 1


def key_window(t: int, spec: BlockSpec, frames: int) -> tuple[int, int]:
    """Inclusive 1-based key range visible to query ``t``, clipped to ``frames``."""
    i = block_of(t, spec)
    s = spec.shift
    lo = 1 if i == 1 else (i - 1) * s + 1
    return lo, min((i + 1) * s, frames)


def build_mask(frames: int, spec: BlockSpec) -> AttentionMask:
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    s = spec.shift
    t = np.arange(1, frames + 1)
    blk = np.where(t <= 2 * s, 1, -(-t // s) - 1)
    lo = np.where(blk == 1, 1, (blk - 1) * s + 1)
    hi = np.minimum((blk + 1) * s, frames)
    u = np.arange(1, frames + 1)
    allowed = (u[None, :] >= lo[:, None]) & (u[None, :] <= hi[:, None])
    return AttentionMask(frames, spec, allowed)


def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def attention_forward(xq, xkv, proj: AttentionProjections, allowed=None):
    """Attention of query rows ``xq`` over key/value rows ``xkv``.

    Returns ``(output, cache)``; ``cache`` feeds :func:`attention_backward`.
    """
    d = proj.d_model
    if xq.ndim != 2 or xq.shape[1] != d or xkv.ndim != 2 or xkv.shape[1] != d:
        raise ShapeError(f"attention inputs {xq.shape}, {xkv.shape} do not match d_model {d}")
    h = proj.n_heads
    scale = 1.0 / math.sqrt(proj.head_dim)
    q = _split_heads(xq @ proj.w_q, h)
    k = _split_heads(xkv @ proj.w_k, h)
    v = _split_heads(xkv @ proj.w_v, h)
    scores = (q @ k.transpose(0, 2, 1)) * scale
    weights = row_softmax(scores, allowed)
    merged = _merge_heads(weights @ v)
    out = merged @ proj.w_o
    cache = (xq, xkv, q, k, v, weights, merged, scale, allowed)
    return out, cache


def attention_backward(dout, cache, proj: AttentionProjections, self_attention=True):
    """Reverse pass of :func:`attention_forward`.

    Returns ``(dxq, dxkv, grads)``; with ``self_attention`` the two input
    gradients are summed into ``dxq`` and ``dxkv`` is ``None``. Masked logits
    get exactly zero gradient because their softmax weight is exactly zero.
    """
    xq, xkv, q, k, v, weights, merged, scale, allowed = cache
    h = proj.n_heads
    grads = {"w_o": merged.T @ dout}
    dctx = _split_heads(dout @ proj.w_o.T, h)
    dweights = dctx @ v.transpose(0, 2, 1)
    dv = weights.transpose(0, 2, 1) @ dctx
    dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dq2, dk2, dv2 = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads["w_q"] = xq.T @ dq2
    grads["w_k"] = xkv.T @ dk2
    grads["w_v"] = xkv.T @ dv2
    dxq = dq2 @ proj.w_q.T
    dxkv = dk2 @ proj.w_k.T + dv2 @ proj.w_v.T
    if self_attention:
        return dxq + dxkv, None, grads
    return dxq, dxkv, grads


def attend_full(x, proj: AttentionProjections, mask: AttentionMask | None = None) -> np.ndarray:
    """Self-attention over all of ``x``; with ``mask`` only allowed pairs interact."""
    x = np.asarray(x)
    allowed = None
    if mask is not None:
        if mask.frames != x.shape[0]:
            raise ShapeError(f"mask covers {mask.frames} frames, input has {x.shape[0]}")
        allowed = mask.allowed
    out, _ = attention_forward(x, x, proj, allowed)
    return out


def attend_streaming(new_frames, cache: LayerCache, proj: AttentionProjections, final: bool = False):
    """Process one block of new attention inputs against the cached previous shift.

    The first call takes ``2S`` frames, later calls ``S`` frames. With ``final``
    the block may be shorter; the cache is then closed. Returns
    ``(outputs, new_cache)``; the input cache is not modified.
    """
    new_frames = np.asarray(new_frames)
    s = cache.spec.shift
    n = new_frames.shape[0]
    if cache.closed:
        raise ValueError("layer cache is closed; the stream already ended")
    expected = 2 * s if cache.blocks == 0 else s
    if n > expected or (n < expected and not final):
        raise ShapeError(f"block {cache.blocks + 1} needs {expected} frames, got {n}")
    if cache.blocks > 0 and cache.valid_len != s:
        raise ShapeError(f"cache holds {cache.valid_len} frames, expected {s}")
    if n == 0:
        return new_frames.reshape(0, proj.d_model), LayerCache(cache.spec, cache.inputs, cache.blocks, True)
    keys = new_frames if cache.inputs is None else np.concatenate([cache.inputs, new_frames])
    out, _ = attention_forward(new_frames, keys, proj)
    kept = keys[-s:].copy()
    return out, LayerCache(cache.spec, kept, cache.blocks + 1, final)


def stream_blocks(frames: int, spec: BlockSpec) -> list[tuple[int, int]]:
    """0-based half-open row ranges of the blocks a stream of ``frames`` is cut into."""
    s = spec.shift
    if frames <= 0:
        return []
    bounds = [(0, min(2 * s, frames))]
    start = 2 * s
    while start < frames:
        bounds.append((start, min(start + s, frames)))
        start += s
    return bounds


def equivalence_report(x, proj: AttentionProjections, spec: BlockSpec) -> float:
    """Max abs difference between the masked full pass and block-by-block streaming."""
    x = np.asarray(x)
    full = attend_full(x, proj, build_mask(x.shape[0], spec))
    cache = LayerCache(spec)
    pieces = []
    blocks = stream_blocks(x.shape[0], spec)
    for j, (a, b) in enumerate(blocks):
        out, cache = attend_streaming(x[a:b], cache, proj, final=j == len(blocks) - 1)
        pieces.append(out)
    streamed = np.concatenate(pieces)
    return float(np.max(np.abs(full - streamed)))
