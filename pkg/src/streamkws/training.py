"""Reverse-mode gradients, Adam, the multi-task training loop and gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_backward
from .exceptions import NumericError
from .layers import feed_forward_backward, layer_norm_backward, lstm_backward
from .losses import log_softmax_backward
from .model import (
    ModelConfig,
    attention_projections,
    coerce_value,
    forward_full,
    init_params,
    lstm_params,
    mtl_loss,
    param_shapes,
)
from .runtime import tail_score
from .tensor import Rng

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "ctc_loss", "phrase_loss", "phrase_acc", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    clip_norm: float = 5.0
    seed: int = 0

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if not hasattr(defaults, key):
                raise ValueError(f"unknown training config key {key!r}")
            kwargs[key] = coerce_value(raw, type(getattr(defaults, key)))
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def backward(features, ctc_labels, phrase_label, params, config: ModelConfig,
             train_mode: bool = False, rng: Rng | None = None):
    """Loss and exact gradients for one utterance.

    Returns ``(loss_breakdown, grads)`` where ``grads`` mirrors ``params``.
    """
    out = forward_full(features, params, config, train_mode=train_mode, rng=rng, keep_tape=True)
    lb = mtl_loss(out, ctc_labels, phrase_label, config)
    tape = out.tape
    grads = {}

    d_ph = log_softmax_backward(lb.d_log_probs, out.log_probs)
    grads["phonetic.weight"] = out.embeddings.T @ d_ph
    grads["phonetic.bias"] = d_ph.sum(axis=0)
    demb = d_ph @ params["phonetic.weight"].T

    grads["phrase.weight"] = tape["phrase_in"].T @ lb.d_phrase_logits
    grads["phrase.bias"] = lb.d_phrase_logits.sum(axis=0)
    d_phrase_in = lb.d_phrase_logits @ params["phrase.weight"].T
    if config.lstm_in_phrase_branch:
        dx, g, _ = lstm_backward(d_phrase_in, tape["lstm"], lstm_params(params))
        for k, v in g.items():
            grads[f"phrase.lstm.{k}"] = v
        demb = demb + dx
    else:
        demb = demb + d_phrase_in

    dh, grads["encoder.final_ln.gain"], grads["encoder.final_ln.bias"] = \
        layer_norm_backward(demb, tape["final_ln"])
    for layer in range(config.n_layers - 1, -1, -1):
        p = f"encoder.{layer}."
        ln1, att_cache, drop1, ln2, ff_cache, drop2 = tape["layers"][layer]
        dff = dh if drop2 is None else dh * drop2
        df_in, grads[p + "ffn.w1"], grads[p + "ffn.b1"], grads[p + "ffn.w2"], grads[p + "ffn.b2"] = \
            feed_forward_backward(dff, ff_cache, params[p + "ffn.w1"], params[p + "ffn.w2"])
        dx_ln2, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = layer_norm_backward(df_in, ln2)
        dh = dh + dx_ln2
        datt = dh if drop1 is None else dh * drop1
        da_in, _, g = attention_backward(datt, att_cache, attention_projections(params, layer, config))
        for k, v in g.items():
            grads[p + "attn." + k] = v
        dx_ln1, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = layer_norm_backward(da_in, ln1)
        dh = dh + dx_ln1
    grads["input.weight"] = tape["features"].T @ dh
    grads["input.bias"] = dh.sum(axis=0)
    return lb, {name: grads[name].astype(params[name].dtype, copy=False) for name in params}


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of ``params``."""
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p -= update.astype(p.dtype, copy=False)


@dataclass
class EpochMetrics:
    epoch: int
    ctc_loss: float
    phrase_loss: float
    phrase_acc: float
    wall_seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), f"{self.ctc_loss:.8f}", f"{self.phrase_loss:.8f}",
                f"{self.phrase_acc:.6f}", f"{self.wall_seconds:.3f}"]


@dataclass
class TrainResult:
    params: dict
    metrics: list = field(default_factory=list)


def utterance_decision(features, params, config: ModelConfig) -> float:
    """Utterance-level phrase score: mean positive probability over the final frames."""
    out = forward_full(features, params, config)
    return tail_score(out.phrase_positive_prob())


def phrase_accuracy(utterances, params, config: ModelConfig, threshold: float = 0.5) -> float:
    if not utterances:
        return float("nan")
    hits = sum(int((utterance_decision(u.features, params, config) >= threshold) == bool(u.phrase_label))
               for u in utterances)
    return hits / len(utterances)


def train(config: ModelConfig, corpus, epochs: int | None = None, seed: int | None = None,
          train_config: TrainConfig | None = None, dev=None, params=None,
          log_path=None) -> TrainResult:
    """Mini-batch Adam on the summed CTC + phrase loss.

    ``corpus`` and ``dev`` are sequences of utterances (see :mod:`streamkws.data`).
    ``phrase_acc`` in the log is measured after each epoch on ``dev`` when
    given, else on the training utterances.
    """
    tc = train_config or TrainConfig()
    if epochs is not None:
        tc = tc.replace(epochs=epochs)
    if seed is not None:
        tc = tc.replace(seed=seed)
    corpus = list(corpus)
    if not corpus:
        raise ValueError("training corpus is empty")
    rng = Rng(tc.seed)
    if params is None:
        params = init_params(config, tc.seed)
    params = {k: np.array(v, dtype=config.dtype) for k, v in params.items()}
    opt = Adam(params, tc.lr, tc.beta1, tc.beta2, tc.eps)
    shuffle_rng = rng.spawn(1)
    dropout_rng = rng.spawn(2) if config.dropout > 0 else None
    metrics = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
    try:
        for epoch in range(1, tc.epochs + 1):
            start = time.monotonic()
            order = shuffle_rng.permutation(len(corpus))
            ctc_sum = phrase_sum = 0.0
            for b in range(0, len(order), tc.batch_size):
                batch = [corpus[i] for i in order[b:b + tc.batch_size]]
                acc = {k: np.zeros_like(v) for k, v in params.items()}
                for utt in batch:
                    lb, grads = backward(utt.features, utt.tokens, utt.phrase_label, params, config,
                                         train_mode=True, rng=dropout_rng)
                    if not np.isfinite(lb.total):
                        raise NumericError(
                            f"non-finite loss {lb.total} at epoch {epoch} on utterance {utt.utt_id} "
                            f"(ctc={lb.ctc}, phrase={lb.phrase}, frames={len(utt.features)}, "
                            f"tokens={len(utt.tokens)})")
                    ctc_sum += lb.ctc
                    phrase_sum += lb.phrase
                    for k, g in grads.items():
                        acc[k] += g
                for g in acc.values():
                    g /= len(batch)
                clip_by_global_norm(acc, tc.clip_norm)
                opt.step(params, acc)
            for k, p in params.items():
                if not np.all(np.isfinite(p)):
                    raise NumericError(f"parameter {k} became non-finite at epoch {epoch}")
            acc_value = phrase_accuracy(dev if dev is not None else corpus, params, config)
            m = EpochMetrics(epoch, ctc_sum / len(corpus), phrase_sum / len(corpus), acc_value,
                             time.monotonic() - start)
            metrics.append(m)
            logger.info("epoch %d ctc=%.4f phrase=%.4f acc=%.3f (%.1fs)", epoch, m.ctc_loss,
                        m.phrase_loss, m.phrase_acc, m.wall_seconds)
            if writer is not None:
                writer.writerow(m.row())
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(params, metrics)


# -- gradient checking -----------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict  # tensor name -> max error relative to the tensor's gradient scale
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        return [f"{name},{err:.3e},{'ok' if err < self.tolerance else 'FAIL'}"
                for name, err in self.errors.items()]


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max entry-wise difference over the larger of the two gradients' max magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(loss_fn, params: dict, name: str, step: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of ``loss_fn(params)`` w.r.t. ``params[name]`` (restored afterwards)."""
    p = params[name]
    flat = p.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(params)
        flat[i] = orig - step
        down = loss_fn(params)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(p.shape)


def gradcheck_example(config: ModelConfig, seed: int = 0, frames: int | None = None):
    """Random features, feasible labels and a phrase label for a gradient check."""
    rng = Rng(seed).spawn(7)
    if frames is None:
        frames = 2 * config.shift + max(1, config.shift // 2) + 1 if config.shift else 9
    features = rng.normal(size=(frames, config.feature_dim))
    n_tokens = max(1, min(3, frames // 3))
    tokens = [int(t) for t in rng.integers(0, config.vocab_size, n_tokens)]
    return features, tokens, int(rng.integers(0, 2))


def gradcheck(config: ModelConfig, seed: int = 0, step: float = 1e-5, tolerance: float = 1e-4,
              max_entries: int | None = None, frames: int | None = None) -> GradcheckReport:
    """Compare :func:`backward` against central differences for every tensor.

    Runs in 64-bit without dropout. ``max_entries`` caps the number of
    randomly chosen entries checked per tensor (``None`` checks all).
    """
    config = config.replace(precision="f64", dropout=0.0)
    params = init_params(config, seed)
    rng = Rng(seed).spawn(11)
    # random biases and gains so their gradients are exercised away from init
    for name, v in params.items():
        v += rng.normal(scale=0.1, size=v.shape)
    features, tokens, label = gradcheck_example(config, seed, frames)
    _, grads = backward(features, tokens, label, params, config)

    def loss_fn(ps):
        return mtl_loss(forward_full(features, ps, config), tokens, label, config).total

    errors = {}
    for name in param_shapes(config):
        size = params[name].size
        entries = None
        if max_entries is not None and size > max_entries:
            entries = sorted(int(i) for i in rng.permutation(size)[:max_entries])
        num = numeric_gradient(loss_fn, params, name, step, entries)
        ana = grads[name]
        if entries is not None:
            ana = ana.reshape(-1)[entries]
            num = num.reshape(-1)[entries]
        errors[name] = relative_error(ana, num)
    return GradcheckReport(errors, tolerance)
