"""Streaming Transformer encoder with a phonetic CTC head and a phrase head.

Parameters live in a flat ``dict`` of named numpy arrays (see
:func:`param_shapes` for the full list). The encoder is pre-norm::

    h = x + attn(ln1(x))
    h = h + ffn(ln2(h))

followed by a final layer norm whose output feeds both heads.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionProjections, BlockSpec, attention_forward, build_mask
from .exceptions import FormatError, ShapeError
from .layers import (
    LstmParams,
    LstmState,
    feed_forward_forward,
    layer_norm_forward,
    lstm_forward_cached,
    pos_encode,
)
from .losses import ctc_loss, frame_ce_loss, log_softmax_backward
from .tensor import Rng, log_softmax, resolve_dtype

PHRASE_LOSSES = ("frame_ce", "ctc_seq")
CKPT_MAGIC = b"SKWS-CKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 64
    vocab_size: int = 8
    lstm_hidden: int = 32
    shift: int = 8
    phrase_loss: str = "frame_ce"
    lstm_in_phrase_branch: bool = True
    lambda_ctc: float = 1.0
    lambda_phrase: float = 1.0
    dropout: float = 0.1
    precision: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.shift < 0:
            raise ValueError("shift must be 0 (vanilla attention) or >= 1")
        if self.phrase_loss not in PHRASE_LOSSES:
            raise ValueError(f"phrase_loss must be one of {PHRASE_LOSSES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        resolve_dtype(self.precision)
        for name in ("feature_dim", "d_model", "n_heads", "n_layers", "ffn_dim", "vocab_size", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def dtype(self) -> np.dtype:
        return resolve_dtype(self.precision)

    @property
    def streaming(self) -> bool:
        return self.shift > 0

    @property
    def block_spec(self) -> BlockSpec | None:
        return BlockSpec(self.shift) if self.shift > 0 else None

    @property
    def phrase_classes(self) -> int:
        # ctc_seq: {false, true} plus a blank
        return 2 if self.phrase_loss == "frame_ce" else 3

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def variant(self, streaming: bool, lstm_ce: bool, shift: int = 8) -> "ModelConfig":
        """One of the four ablation rows: streaming SA on/off x (uniLSTM + frame CE) on/off."""
        return self.replace(
            shift=(self.shift or shift) if streaming else 0,
            phrase_loss="frame_ce" if lstm_ce else "ctc_seq",
            lstm_in_phrase_branch=lstm_ce,
        )

    def to_text(self) -> str:
        return format_key_values(dataclasses.asdict(self))

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown model config key {key!r}")
            kwargs[key] = coerce_value(raw, type(getattr(cls(), key)))
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_key_values(text))


def format_key_values(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce_value(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return kind(raw)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map of every parameter name to its shape."""
    d, f = config.d_model, config.feature_dim
    shapes = {"input.weight": (f, d), "input.bias": (d,)}
    for layer in range(config.n_layers):
        p = f"encoder.{layer}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.w_q": (d, d), p + "attn.w_k": (d, d),
            p + "attn.w_v": (d, d), p + "attn.w_o": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, config.ffn_dim), p + "ffn.b1": (config.ffn_dim,),
            p + "ffn.w2": (config.ffn_dim, d), p + "ffn.b2": (d,),
        })
    shapes["encoder.final_ln.gain"] = (d,)
    shapes["encoder.final_ln.bias"] = (d,)
    shapes["phonetic.weight"] = (d, config.vocab_size + 1)
    shapes["phonetic.bias"] = (config.vocab_size + 1,)
    phrase_in = d
    if config.lstm_in_phrase_branch:
        h = config.lstm_hidden
        shapes["phrase.lstm.w_x"] = (d, 4 * h)
        shapes["phrase.lstm.w_h"] = (h, 4 * h)
        shapes["phrase.lstm.b"] = (4 * h,)
        phrase_in = h
    shapes["phrase.weight"] = (phrase_in, config.phrase_classes)
    shapes["phrase.bias"] = (config.phrase_classes,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Xavier-uniform matrices, zero biases, unit norm gains, LSTM forget bias 1."""
    rng = Rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, shape)
        else:
            value = np.zeros(shape)
            if name == "phrase.lstm.b":
                h = config.lstm_hidden
                value[h:2 * h] = 1.0
        params[name] = value.astype(config.dtype)
    return params


def check_params(params: dict, config: ModelConfig) -> None:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ShapeError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name} has shape {params[name].shape}, config implies {shape}")


def attention_projections(params, layer: int, config: ModelConfig) -> AttentionProjections:
    p = f"encoder.{layer}.attn."
    return AttentionProjections(params[p + "w_q"], params[p + "w_k"], params[p + "w_v"],
                                params[p + "w_o"], config.n_heads)


def lstm_params(params) -> LstmParams:
    return LstmParams(params["phrase.lstm.w_x"], params["phrase.lstm.w_h"], params["phrase.lstm.b"])


@dataclass
class ForwardOutput:
    embeddings: np.ndarray  # (T, D)
    log_probs: np.ndarray  # (T, V+1), blank last
    phrase_logits: np.ndarray  # (T, 2) or (T, 3) in ctc_seq mode
    tape: dict = field(default=None, repr=False)

    @property
    def frames(self) -> int:
        return self.embeddings.shape[0]

    def phrase_positive_prob(self) -> np.ndarray:
        return phrase_positive_prob(self.phrase_logits)


def phrase_positive_prob(phrase_logits) -> np.ndarray:
    """Per-frame probability of the true-trigger class.

    With a blank column (ctc_seq mode) the two label columns are renormalised
    against each other so the score stays comparable with frame-CE models.
    """
    logp = log_softmax(np.asarray(phrase_logits)[:, :2])
    return np.exp(logp[:, 1])


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return x * keep, keep


def forward_full(features, params, config: ModelConfig, train_mode: bool = False,
                 rng: Rng | None = None, keep_tape: bool = False) -> ForwardOutput:
    """Single pass over a whole utterance.

    With ``config.shift > 0`` every attention layer uses the block mask, which
    reproduces the streaming runtime's outputs exactly. Dropout is active only
    when ``train_mode`` is set and an ``rng`` is given.
    """
    dtype = config.dtype
    x = np.asarray(features, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != config.feature_dim:
        raise ShapeError(f"features have shape {x.shape}, expected (T, {config.feature_dim})")
    if x.shape[0] < 1:
        raise ShapeError("forward_full needs at least one frame")
    rate = config.dropout if train_mode else 0.0
    t_len = x.shape[0]
    tape = {"features": x, "layers": []}
    h = pos_encode(x @ params["input.weight"] + params["input.bias"], 0)
    allowed = build_mask(t_len, config.block_spec).allowed if config.streaming else None
    tape["allowed"] = allowed
    for layer in range(config.n_layers):
        p = f"encoder.{layer}."
        a_in, ln1 = layer_norm_forward(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
        att, att_cache = attention_forward(a_in, a_in, attention_projections(params, layer, config), allowed)
        att, drop1 = _dropout(att, rate, rng)
        h = h + att
        f_in, ln2 = layer_norm_forward(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
        ff, ff_cache = feed_forward_forward(f_in, params[p + "ffn.w1"], params[p + "ffn.b1"],
                                            params[p + "ffn.w2"], params[p + "ffn.b2"])
        ff, drop2 = _dropout(ff, rate, rng)
        h = h + ff
        tape["layers"].append((ln1, att_cache, drop1, ln2, ff_cache, drop2))
    emb, lnf = layer_norm_forward(h, params["encoder.final_ln.gain"], params["encoder.final_ln.bias"])
    tape["final_ln"] = lnf
    log_probs = log_softmax(emb @ params["phonetic.weight"] + params["phonetic.bias"])
    phrase_in = emb
    if config.lstm_in_phrase_branch:
        hs, _, lstm_cache = lstm_forward_cached(emb, LstmState.zeros(config.lstm_hidden, dtype),
                                                lstm_params(params))
        tape["lstm"] = lstm_cache
        phrase_in = hs
    tape["phrase_in"] = phrase_in
    phrase_logits = phrase_in @ params["phrase.weight"] + params["phrase.bias"]
    return ForwardOutput(emb, log_probs, phrase_logits, tape if keep_tape else None)


@dataclass
class LossBreakdown:
    total: float
    ctc: float
    phrase: float
    d_log_probs: np.ndarray
    d_phrase_logits: np.ndarray


def mtl_loss(out: ForwardOutput, ctc_labels, phrase_label: int, config: ModelConfig,
             class_weights=None) -> LossBreakdown:
    """Weighted sum of the phonetic CTC loss and the phrase loss.

    Gradients are with respect to the phonetic log-probabilities and the raw
    phrase logits; a zero weight yields an exactly-zero gradient for that head.
    """
    ctc, d_logp = ctc_loss(out.log_probs, ctc_labels)
    if config.lambda_ctc == 0.0:
        d_logp = np.zeros_like(d_logp)
    else:
        d_logp = d_logp * config.lambda_ctc
    if config.phrase_loss == "frame_ce":
        phrase, d_phr = frame_ce_loss(out.phrase_logits, int(phrase_label), class_weights)
    else:
        logp = log_softmax(out.phrase_logits)
        phrase, d_lp = ctc_loss(logp, [int(phrase_label)])
        d_phr = log_softmax_backward(d_lp, logp)
    if config.lambda_phrase == 0.0:
        d_phr = np.zeros_like(d_phr)
    else:
        d_phr = d_phr * config.lambda_phrase
    # a zero-weighted term is dropped outright so an infinite loss there cannot poison the sum
    total = (config.lambda_ctc * ctc if config.lambda_ctc else 0.0) + \
        (config.lambda_phrase * phrase if config.lambda_phrase else 0.0)
    return LossBreakdown(float(total), float(ctc), float(phrase), d_logp, d_phr)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params, config: ModelConfig, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config))


def checkpoint_bytes(params, config: ModelConfig) -> bytes:
    check_params(params, config)
    ftype = "<f8" if config.precision == "f64" else "<f4"
    buf = io.BytesIO()
    cfg = config.to_text().encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    shapes = param_shapes(config)
    buf.write(struct.pack("<I", len(shapes)))
    for name, shape in shapes.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        buf.write(np.ascontiguousarray(params[name], dtype=ftype).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what} "
                              f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, precision: str | None = None):
    """Read ``(params, config)``; ``precision`` optionally converts the loaded tensors."""
    return parse_checkpoint(Path(path).read_bytes(), precision)


def parse_checkpoint(data: bytes, precision: str | None = None):
    r = _Reader(data)
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, cfg_len = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_text(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"invalid config block: {exc}") from exc
    ftype = np.dtype("<f8" if config.precision == "f64" else "<f4")
    shapes = param_shapes(config)
    (count,) = r.unpack("<I", "tensor count")
    if count != len(shapes):
        raise FormatError(f"checkpoint has {count} tensors, config implies {len(shapes)}")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        if name not in shapes or name in params:
            raise FormatError(f"unexpected tensor {name!r}")
        (rank,) = r.unpack("<I", "rank")
        dims = r.unpack(f"<{rank}I", "dims") if rank <= 8 else None
        if dims is None or tuple(dims) != shapes[name]:
            raise FormatError(f"tensor {name} has dims {dims}, config implies {shapes[name]}")
        n = int(np.prod(dims, dtype=np.int64))
        raw = r.take(n * ftype.itemsize, f"tensor {name}")
        params[name] = np.frombuffer(raw, dtype=ftype).reshape(dims).astype(config.dtype)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    if precision is not None and precision != config.precision:
        config = config.replace(precision=precision)
        params = {k: v.astype(config.dtype) for k, v in params.items()}
    return params, config
