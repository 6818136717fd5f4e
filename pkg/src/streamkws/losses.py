"""CTC and frame-wise cross-entropy losses with analytic gradients.

The blank symbol is always the last column of the log-probability matrix
(index ``V`` for a ``V``-token vocabulary).
"""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError
from .tensor import log_softmax

NEG_INF = -np.inf


def _extended_labels(labels, blank):
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext, blank):
    skip = np.zeros(len(ext), dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def ctc_loss(log_probs, labels):
    """Negative log-likelihood of ``labels`` under CTC, and its gradient.

    Args:
      log_probs: (T, V+1) per-frame log distributions; column V is blank.
      labels: token ids in ``[0, V)``.

    Returns:
      ``(loss, grad)`` with ``grad = d loss / d log_probs`` of shape (T, V+1).
      An unreachable target (too few frames) gives ``loss = inf`` and a zero
      gradient.
    """
    log_probs = np.asarray(log_probs)
    if log_probs.ndim != 2:
        raise ShapeError(f"log_probs must be 2-D, got {log_probs.shape}")
    t_len, n_cls = log_probs.shape
    blank = n_cls - 1
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= blank):
        raise ValueError(f"labels must lie in [0, {blank}), got {labels.tolist()}")
    grad = np.zeros_like(log_probs)
    if t_len == 0:
        return (0.0 if labels.size == 0 else np.inf), grad

    ext = _extended_labels(labels, blank)
    n_states = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]  # (T, S) emission log-probs per lattice state

    alpha = np.full((t_len, n_states), NEG_INF, dtype=log_probs.dtype)
    alpha[0, 0] = lp[0, 0]
    if n_states > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t]

    tail = alpha[-1, -2:] if n_states > 1 else alpha[-1, -1:]
    log_z = np.logaddexp.reduce(tail)
    if not np.isfinite(log_z):
        return np.inf, grad

    beta = np.full((t_len, n_states), NEG_INF, dtype=log_probs.dtype)
    beta[-1, -1] = lp[-1, -1]
    if n_states > 1:
        beta[-1, -2] = lp[-1, -2]
    # skip from s to s+2 is allowed exactly when skip[s+2] is
    skip_fwd = np.zeros(n_states, dtype=bool)
    skip_fwd[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_fwd[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t]

    with np.errstate(invalid="ignore"):
        log_occ = np.where(np.isfinite(lp), alpha + beta - lp - log_z, NEG_INF)
    occ = np.exp(log_occ)
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return float(-log_z), grad


def ctc_greedy_decode(log_probs) -> list[int]:
    """Best-path decoding: per-frame argmax (ties to lowest index), collapse repeats, drop blanks."""
    log_probs = np.asarray(log_probs)
    if log_probs.shape[0] == 0:
        return []
    blank = log_probs.shape[1] - 1
    best = np.argmax(log_probs, axis=1)
    out = []
    prev = None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


def frame_ce_loss(logits, target: int, class_weights=None):
    """Mean over frames of the weighted cross-entropy against one replicated label.

    Returns ``(loss, grad)`` with ``grad`` of the same shape as ``logits``.
    """
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be (T>=1, C), got {logits.shape}")
    t_len, n_cls = logits.shape
    if not 0 <= target < n_cls:
        raise ValueError(f"target {target} outside [0, {n_cls})")
    weights = np.ones(n_cls) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    w = weights[target]
    logp = log_softmax(logits)
    loss = float(-w * logp[:, target].mean())
    grad = np.exp(logp)
    grad[:, target] -= 1.0
    grad *= w / t_len
    return loss, grad.astype(logits.dtype, copy=False)


def log_softmax_backward(grad_logp, logp):
    """Map a gradient w.r.t. log-softmax outputs to one w.r.t. the logits."""
    return grad_logp - np.exp(logp) * grad_logp.sum(axis=-1, keepdims=True)
