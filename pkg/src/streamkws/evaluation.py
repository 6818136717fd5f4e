"""DET-curve evaluation of the phrase branch and the streaming/full-pass benchmark."""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .losses import ctc_greedy_decode
from .model import ModelConfig, forward_full
from .runtime import StreamingSession, analytic_state_bytes, tail_score


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    false_trigger_rate: float
    frr: float


def det_curve(pos_scores, neg_scores) -> list[DetPoint]:
    """Sweep every observed score as an accept threshold (accept when ``score >= threshold``).

    Rows are sorted by threshold; the last row uses ``inf`` so both endpoints
    (FRR 0 and false-trigger rate 0) are always present.
    """
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("DET curve needs both positive and negative scores")
    thresholds = np.unique(np.concatenate([pos, neg]))
    thresholds = np.append(thresholds, np.inf)
    frr = np.searchsorted(pos, thresholds, side="left") / pos.size
    ftr = 1.0 - np.searchsorted(neg, thresholds, side="left") / neg.size
    return [DetPoint(float(t), float(a), float(r)) for t, a, r in zip(thresholds, ftr, frr)]


def ftr_at_frr(points, max_frr: float = 0.01) -> float:
    """Lowest false-trigger rate among operating points with FRR at most ``max_frr``."""
    ok = [p.false_trigger_rate for p in points if p.frr <= max_frr + 1e-12]
    return min(ok) if ok else 1.0


def det_csv(points) -> str:
    lines = ["threshold,false_trigger_rate,frr"]
    lines += [f"{p.threshold!r},{p.false_trigger_rate!r},{p.frr!r}" for p in points]
    return "\n".join(lines) + "\n"


def prefix_score(params, config: ModelConfig, features, frames: int) -> float:
    """Smoothed phrase score after the first ``frames`` frames of an utterance.

    Streaming models run a session over the prefix (flushing the partial last
    block); vanilla models run one full pass over the prefix.
    """
    frames = max(1, min(frames, len(features)))
    prefix = features[:frames]
    if config.streaming:
        session = StreamingSession(params, config)
        session.push(prefix)
        session.finish()
        return session.smoothed_score()
    return tail_score(forward_full(prefix, params, config).phrase_positive_prob())


@dataclass
class FtmResult:
    post_frames: int
    scores: np.ndarray
    labels: np.ndarray
    points: list

    @property
    def ftr_at_1pct(self) -> float:
        return ftr_at_frr(self.points, 0.01)


def evaluate_ftm(params, config: ModelConfig, utterances, post_frames: int) -> FtmResult:
    """Score every utterance at ``trigger_end_frame + post_frames`` and sweep thresholds."""
    if post_frames < 0:
        raise ValueError("post_trigger_frames must be >= 0")
    scores = np.array([prefix_score(params, config, u.features, u.trigger_end_frame + post_frames)
                       for u in utterances])
    labels = np.array([u.phrase_label for u in utterances])
    points = det_curve(scores[labels == 1], scores[labels == 0])
    return FtmResult(post_frames, scores, labels, points)


def contains_run(seq, sub) -> bool:
    n = len(sub)
    return n == 0 or any(list(seq[i:i + n]) == list(sub) for i in range(len(seq) - n + 1))


@dataclass
class VtdResult:
    frr: float  # utterances whose labels contain the trigger but the decode does not
    false_alarm_rate: float  # utterances without the trigger whose decode contains it
    n_target: int
    n_nontarget: int


def evaluate_vtd(params, config: ModelConfig, utterances, trigger) -> VtdResult:
    """Phonetic-branch trigger detection by greedy decoding over the whole utterance."""
    miss = fa = n_t = n_n = 0
    for u in utterances:
        decoded = ctc_greedy_decode(forward_full(u.features, params, config).log_probs)
        hit = contains_run(decoded, trigger)
        if contains_run(u.tokens, trigger):
            n_t += 1
            miss += not hit
        else:
            n_n += 1
            fa += hit
    return VtdResult(miss / max(n_t, 1), fa / max(n_n, 1), n_t, n_n)


# -- benchmark -----------------------------------------------------------------------

@dataclass
class BenchRow:
    mode: str
    length: int
    total_seconds: float
    block_median: float | None
    block_mean: float | None
    block_p95: float | None
    state_bytes: int | None

    def csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else (f"{v:.9f}" if isinstance(v, float) else str(v))
        return ",".join([self.mode, str(self.length), fmt(self.total_seconds), fmt(self.block_median),
                         fmt(self.block_mean), fmt(self.block_p95), fmt(self.state_bytes)])


BENCH_HEADER = "mode,length,total_seconds,block_median,block_mean,block_p95,state_bytes"


def _time_full(params, config, x) -> float:
    start = time.perf_counter()
    forward_full(x, params, config)
    return time.perf_counter() - start


def _time_stream(params, config, x):
    start = time.perf_counter()
    session = StreamingSession(params, config)
    session.push(x)
    session.finish()
    return time.perf_counter() - start, session.stats()


def run_bench(params, config: ModelConfig, lengths, repeats: int = 15, seed: int = 0) -> list[BenchRow]:
    """Time a vanilla full pass and a streaming session over random inputs of each length.

    ``config`` must be a streaming config; the full-pass rows reuse the same
    parameters with the block mask switched off. Measurements run in
    ``repeats`` interleaved rounds over all lengths, so slow periods on a busy
    machine hit every length alike. Totals are medians over rounds; per-block
    statistics pool the steady-state blocks of every round.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("bench needs at least two strictly increasing lengths")
    if not config.streaming:
        raise ValueError("bench needs a streaming config (shift >= 1)")
    vanilla = config.replace(shift=0)
    rng = np.random.default_rng(seed)
    inputs = {n: rng.normal(size=(n, config.feature_dim)).astype(config.dtype) for n in lengths}
    full = {n: [] for n in lengths}
    totals = {n: [] for n in lengths}
    blocks = {n: [] for n in lengths}
    for n in lengths:  # warm-up
        _time_full(params, vanilla, inputs[n])
        _time_stream(params, config, inputs[n])
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for n in lengths:
                full[n].append(_time_full(params, vanilla, inputs[n]))
                total, st = _time_stream(params, config, inputs[n])
                totals[n].append(total)
                # the first block carries 2S frames and the last may be partial
                blocks[n].extend(st.block_seconds[1:-1] or st.block_seconds)
    finally:
        if gc_was_enabled:
            gc.enable()
    rows = []
    for n in lengths:
        rows.append(BenchRow("full-pass", n, statistics.median(full[n]), None, None, None, None))
        rows.append(BenchRow("streaming", n, statistics.median(totals[n]), statistics.median(blocks[n]),
                             statistics.fmean(blocks[n]), float(np.percentile(blocks[n], 95)),
                             analytic_state_bytes(config)))
    return rows
