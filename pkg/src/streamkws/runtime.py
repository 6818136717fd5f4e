"""Incremental inference: block-by-block encoder with per-layer caches.

A :class:`StreamingSession` holds only bounded state: one ``S x D`` cache per
layer, the LSTM carry, a ten-entry score window and an input buffer shorter
than one block. Its emissions match :func:`streamkws.model.forward_full` on
the same frames.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import LayerCache, attend_streaming
from .exceptions import SessionError, ShapeError
from .layers import LstmState, feed_forward, layer_norm, lstm_forward, pos_encode
from .model import ModelConfig, attention_projections, check_params, lstm_params, phrase_positive_prob
from .tensor import log_softmax

SMOOTHING_WINDOW = 10
SCORE_BYTES = 8  # ring buffer entries are Python floats / float64


def tail_score(probs, window: int = SMOOTHING_WINDOW) -> float:
    """Mean of the last ``min(window, len(probs))`` probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("no scores to smooth")
    return float(probs[-window:].mean())


class Verdict(str, Enum):
    PENDING = "pending"
    TRIGGERED = "triggered"
    CANCELLED = "cancelled"


@dataclass(frozen=True)
class DecisionState:
    verdict: Verdict = Verdict.PENDING
    frame: int | None = None


@dataclass(frozen=True)
class TriggerDecision:
    frame: int
    raw_prob: float
    smoothed: float
    verdict: Verdict


@dataclass(frozen=True)
class Emission:
    frame: int
    log_probs: np.ndarray
    phrase_prob: float
    decision: TriggerDecision


@dataclass
class CancelPolicy:
    """Cancel once the smoothed score drops below ``threshold`` after ``trigger_frame``.

    Frames with index ``>= trigger_frame`` are post-trigger. The first of them
    moves the state from pending to triggered; any post-trigger frame scoring
    below the threshold moves it to cancelled, permanently.
    """

    threshold: float
    trigger_frame: int = 0
    state: DecisionState = field(default_factory=DecisionState)

    def update(self, frame: int, smoothed: float) -> DecisionState:
        if frame < self.trigger_frame or self.state.verdict is Verdict.CANCELLED:
            return self.state
        if smoothed < self.threshold:
            self.state = DecisionState(Verdict.CANCELLED, frame)
        elif self.state.verdict is Verdict.PENDING:
            self.state = DecisionState(Verdict.TRIGGERED, frame)
        return self.state


@dataclass
class SessionStats:
    block_seconds: list
    state_bytes: int
    blocks: int


def analytic_state_bytes(config: ModelConfig) -> int:
    """Bytes of carried state: layer caches, LSTM carry and the score window."""
    item = config.dtype.itemsize
    caches = config.n_layers * config.shift * config.d_model * item
    lstm = 2 * config.lstm_hidden * item if config.lstm_in_phrase_branch else 0
    return caches + lstm + SMOOTHING_WINDOW * SCORE_BYTES


class StreamingSession:
    """Per-utterance streaming state over shared, read-only parameters."""

    def __init__(self, params, config: ModelConfig, threshold: float | None = None,
                 trigger_frame: int = 0):
        if not config.streaming:
            raise ValueError("streaming sessions need a model with shift >= 1")
        check_params(params, config)
        self.params = params
        self.config = config
        self.spec = config.block_spec
        self.caches = [LayerCache(self.spec) for _ in range(config.n_layers)]
        self.lstm_state = (LstmState.zeros(config.lstm_hidden, config.dtype)
                           if config.lstm_in_phrase_branch else None)
        self.frames_consumed = 0
        self.frames_emitted = 0
        self.scores = deque(maxlen=SMOOTHING_WINDOW)
        self.policy = CancelPolicy(threshold, trigger_frame) if threshold is not None else None
        self.block_seconds = []
        self.closed = False
        self._pending = []
        self._pending_len = 0

    @property
    def decision(self) -> DecisionState:
        return self.policy.state if self.policy is not None else DecisionState()

    def _needed(self) -> int:
        return self.spec.block if self.frames_emitted == 0 else self.spec.shift

    def push(self, frames) -> list[Emission]:
        if self.closed:
            raise SessionError("push after finish")
        frames = np.asarray(frames, dtype=self.config.dtype)
        if frames.ndim == 1 and frames.size == 0:
            frames = frames.reshape(0, self.config.feature_dim)
        if frames.ndim != 2 or frames.shape[1] != self.config.feature_dim:
            raise ShapeError(f"frames have shape {frames.shape}, expected (k, {self.config.feature_dim})")
        self.frames_consumed += frames.shape[0]
        if frames.shape[0]:
            self._pending.append(frames)
            self._pending_len += frames.shape[0]
        emitted = []
        while self._pending_len >= self._needed():
            buf = np.concatenate(self._pending)
            n = self._needed()
            block, rest = buf[:n], buf[n:]
            self._pending = [rest] if rest.shape[0] else []
            self._pending_len = rest.shape[0]
            emitted.extend(self._run_block(block, final=False))
        return emitted

    def finish(self) -> list[Emission]:
        """Flush a partial final block and close the session."""
        if self.closed:
            raise SessionError("session already finished")
        emitted = []
        if self._pending_len:
            block = np.concatenate(self._pending)
            self._pending, self._pending_len = [], 0
            emitted = self._run_block(block, final=True)
        self.closed = True
        return emitted

    def _run_block(self, block, final: bool) -> list[Emission]:
        start_time = time.perf_counter()
        p, cfg = self.params, self.config
        start = self.frames_emitted
        h = pos_encode(block @ p["input.weight"] + p["input.bias"], start)
        for layer in range(cfg.n_layers):
            pre = f"encoder.{layer}."
            a_in = layer_norm(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            att, self.caches[layer] = attend_streaming(
                a_in, self.caches[layer], attention_projections(p, layer, cfg), final=final)
            h = h + att
            f_in = layer_norm(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            h = h + feed_forward(f_in, p[pre + "ffn.w1"], p[pre + "ffn.b1"],
                                 p[pre + "ffn.w2"], p[pre + "ffn.b2"])
        emb = layer_norm(h, p["encoder.final_ln.gain"], p["encoder.final_ln.bias"])
        log_probs = log_softmax(emb @ p["phonetic.weight"] + p["phonetic.bias"])
        phrase_in = emb
        if cfg.lstm_in_phrase_branch:
            phrase_in, self.lstm_state = lstm_forward(emb, self.lstm_state, lstm_params(p))
        probs = phrase_positive_prob(phrase_in @ p["phrase.weight"] + p["phrase.bias"])
        out = []
        for j in range(block.shape[0]):
            frame = start + j
            prob = float(probs[j])
            self.scores.append(prob)
            smoothed = float(np.mean(self.scores))
            if self.policy is not None:
                verdict = self.policy.update(frame, smoothed).verdict
            else:
                verdict = Verdict.PENDING
            out.append(Emission(frame, log_probs[j], prob, TriggerDecision(frame, prob, smoothed, verdict)))
        self.frames_emitted += block.shape[0]
        self.block_seconds.append(time.perf_counter() - start_time)
        return out

    def smoothed_score(self) -> float:
        if not self.scores:
            raise ValueError("no frames emitted yet")
        return float(np.mean(self.scores))

    def measured_state_bytes(self) -> int:
        lstm = self.lstm_state.nbytes if self.lstm_state is not None else 0
        return sum(c.nbytes for c in self.caches) + lstm + SMOOTHING_WINDOW * SCORE_BYTES

    def stats(self) -> SessionStats:
        return SessionStats(list(self.block_seconds), analytic_state_bytes(self.config),
                            len(self.block_seconds))


def session_push(session: StreamingSession, frames) -> list[Emission]:
    return session.push(frames)


def session_finish(session: StreamingSession) -> list[Emission]:
    return session.finish()


def smoothed_score(session: StreamingSession) -> float:
    return session.smoothed_score()


def session_stats(session: StreamingSession) -> SessionStats:
    return session.stats()


def apply_policy(session: StreamingSession, threshold: float, trigger_frame: int) -> DecisionState:
    """Install a cancel policy on ``session`` and return its current state.

    Only frames emitted after this call are judged; install the policy (or
    pass ``threshold`` to the constructor) before pushing post-trigger audio.
    """
    session.policy = CancelPolicy(threshold, trigger_frame)
    return session.policy.state


def run_stream(params, config: ModelConfig, features, chunk: int | None = None,
               threshold: float | None = None, trigger_frame: int = 0):
    """Stream ``features`` through a fresh session; returns ``(emissions, session)``."""
    session = StreamingSession(params, config, threshold, trigger_frame)
    features = np.asarray(features)
    step = chunk or max(1, features.shape[0])
    emissions = []
    for a in range(0, features.shape[0], step):
        emissions.extend(session.push(features[a:a + step]))
    emissions.extend(session.finish())
    return emissions, session
