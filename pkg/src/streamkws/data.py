"""Synthetic trigger-phrase corpus and the feature/label file formats.

Each token is a fixed unit-norm prototype vector held for ``frames_per_token``
frames with Gaussian noise on top. Three utterance kinds are rendered:

* true triggers: the trigger tokens, then a continuation drawn from the
  true-trigger continuation tokens;
* confusables: the trigger prefix up to the divergence point, different
  tokens for the rest of the trigger, then a false-trigger continuation;
* random negatives: random tokens that never contain the trigger.

With the divergence point at the full trigger length the two trigger classes
are identical up to ``trigger_end_frame`` and only the continuation tells them
apart.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .model import coerce_value, format_key_values, parse_key_values
from .tensor import Rng

FEAT_MAGIC = b"SKWSFEAT"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<HII")

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class CorpusSpec:
    n_true: int = 300
    n_confusable: int = 240
    n_negative: int = 60
    trigger: tuple = (0, 1, 2, 3)
    divergence: int = 4
    true_continuation: tuple = (4, 5)
    false_continuation: tuple = (6, 7)
    n_post_tokens: int = 3
    feature_dim: int = 16
    vocab_size: int = 8
    frames_per_token: int = 6
    sigma: float = 0.3
    max_jitter: int = 7
    split_fractions: tuple = (0.6, 0.1, 0.3)
    max_cosine: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_true", "n_confusable", "n_negative"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 (every class needs examples)")
        if not 0 <= self.divergence <= len(self.trigger):
            raise ValueError("divergence must lie in [0, len(trigger)]")
        used = set(self.trigger) | set(self.true_continuation) | set(self.false_continuation)
        if any(not 0 <= t < self.vocab_size for t in used):
            raise ValueError("token ids must lie in [0, vocab_size)")
        if not self.true_continuation or not self.false_continuation:
            raise ValueError("continuation token sets must be non-empty")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three values summing to 1")

    @property
    def trigger_frames(self) -> int:
        return len(self.trigger) * self.frames_per_token

    @property
    def post_frames(self) -> int:
        return self.n_post_tokens * self.frames_per_token

    def replace(self, **changes) -> "CorpusSpec":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return format_key_values(dataclasses.asdict(self))

    @classmethod
    def from_mapping(cls, values: dict) -> "CorpusSpec":
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if not hasattr(defaults, key):
                raise ValueError(f"unknown corpus key {key!r}")
            kind = type(getattr(defaults, key))
            if key == "split_fractions" and isinstance(raw, str):
                kwargs[key] = tuple(float(x) for x in raw.split(","))
            else:
                kwargs[key] = coerce_value(raw, kind)
        return cls(**kwargs)


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T, F) float32
    tokens: list
    phrase_label: int  # 1 = true trigger, 0 = false trigger
    trigger_end_frame: int
    kind: str = ""


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    prototypes: np.ndarray

    def split(self, name: str) -> list:
        return getattr(self, name)


def token_prototypes(vocab_size: int, feature_dim: int, rng: Rng, max_cosine: float = 0.8,
                     max_tries: int = 10000) -> np.ndarray:
    """Unit-norm prototypes whose pairwise cosine similarity stays below ``max_cosine``."""
    protos = []
    tries = 0
    while len(protos) < vocab_size:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {vocab_size} prototypes in {feature_dim} dims "
                             f"with cosine < {max_cosine}")
        v = rng.normal(size=feature_dim)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        v = v / norm
        if all(abs(float(v @ p)) < max_cosine for p in protos):
            protos.append(v)
    return np.array(protos)


def render(tokens, prototypes, spec: CorpusSpec, rng: Rng, lead: int = 0) -> np.ndarray:
    """Noisy frames for ``lead`` silent frames followed by ``tokens``."""
    f = prototypes.shape[1]
    means = [np.zeros((lead, f))] + [np.tile(prototypes[t], (spec.frames_per_token, 1)) for t in tokens]
    clean = np.concatenate(means) if means else np.zeros((0, f))
    return (clean + rng.normal(scale=spec.sigma, size=clean.shape)).astype(np.float32)


def _contains(seq, sub) -> bool:
    n = len(sub)
    return any(list(seq[i:i + n]) == list(sub) for i in range(len(seq) - n + 1))


def _confusable_tokens(spec: CorpusSpec, rng: Rng) -> list:
    out = list(spec.trigger[:spec.divergence])
    for pos in range(spec.divergence, len(spec.trigger)):
        choices = [t for t in range(spec.vocab_size) if t != spec.trigger[pos]]
        out.append(int(choices[rng.integers(0, len(choices))]))
    return out


def _negative_tokens(spec: CorpusSpec, rng: Rng) -> list:
    n = len(spec.trigger) + spec.n_post_tokens
    while True:
        toks = [int(t) for t in rng.integers(0, spec.vocab_size, n)]
        if not _contains(toks, spec.trigger):
            return toks


def make_utterance(kind: str, spec: CorpusSpec, prototypes, rng: Rng, utt_id: str) -> Utterance:
    lead = int(rng.integers(0, spec.max_jitter + 1))
    if kind == "true":
        head = list(spec.trigger)
        cont = spec.true_continuation
        label = 1
    elif kind == "confusable":
        head = _confusable_tokens(spec, rng)
        cont = spec.false_continuation
        label = 0
    elif kind == "negative":
        toks = _negative_tokens(spec, rng)
        feats = render(toks, prototypes, spec, rng, lead)
        return Utterance(utt_id, feats, toks, 0, lead + spec.trigger_frames, kind)
    else:
        raise ValueError(f"unknown utterance kind {kind!r}")
    tail = [int(cont[i]) for i in rng.integers(0, len(cont), spec.n_post_tokens)]
    toks = [int(t) for t in head] + tail
    feats = render(toks, prototypes, spec, rng, lead)
    return Utterance(utt_id, feats, toks, label, lead + spec.trigger_frames, kind)


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_dev = int(round(n * fractions[1]))
    return n_train, n_dev, n - n_train - n_dev


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic train/dev/test corpus; each class is split by the same fractions."""
    rng = Rng(spec.seed)
    prototypes = token_prototypes(spec.vocab_size, spec.feature_dim, rng.spawn(0), spec.max_cosine)
    splits = {name: [] for name in SPLITS}
    for k, (kind, count) in enumerate((("true", spec.n_true), ("confusable", spec.n_confusable),
                                       ("negative", spec.n_negative))):
        kind_rng = rng.spawn(k + 1)
        utts = [make_utterance(kind, spec, prototypes, kind_rng, "") for _ in range(count)]
        a, b, _ = _split_counts(count, spec.split_fractions)
        splits["train"] += utts[:a]
        splits["dev"] += utts[a:a + b]
        splits["test"] += utts[a + b:]
    for s, name in enumerate(SPLITS):
        order = rng.spawn(100 + s).permutation(len(splits[name]))
        splits[name] = [splits[name][i] for i in order]
        for i, u in enumerate(splits[name]):
            u.utt_id = f"{name}-{i:05d}"
    return Corpus(splits["train"], splits["dev"], splits["test"], prototypes)


# -- file formats ------------------------------------------------------------------

def feature_bytes(features) -> bytes:
    x = np.asarray(features)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    return FEAT_MAGIC + _FEAT_HEADER.pack(FEAT_VERSION, *x.shape) + np.ascontiguousarray(x, "<f4").tobytes()


def write_features(path, features) -> None:
    Path(path).write_bytes(feature_bytes(features))


def parse_features(data: bytes) -> np.ndarray:
    head = len(FEAT_MAGIC) + _FEAT_HEADER.size
    if len(data) < head or data[:len(FEAT_MAGIC)] != FEAT_MAGIC:
        raise FormatError("not a feature file (bad magic or short header)")
    version, t_len, f_dim = _FEAT_HEADER.unpack_from(data, len(FEAT_MAGIC))
    if version != FEAT_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    expected = t_len * f_dim * 4
    if len(data) - head != expected:
        raise FormatError(f"header declares {t_len}x{f_dim} floats ({expected} bytes), "
                          f"payload has {len(data) - head} bytes")
    x = np.frombuffer(data, dtype="<f4", offset=head).reshape(t_len, f_dim).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise FormatError("feature payload contains non-finite values")
    return x


def read_features(path) -> np.ndarray:
    return parse_features(Path(path).read_bytes())


def format_labels(utterances) -> str:
    lines = []
    for u in utterances:
        toks = " ".join(str(t) for t in u.tokens)
        lines.append(f"{u.utt_id}\t{int(u.phrase_label)}\t{int(u.trigger_end_frame)}\t{toks}")
    return "".join(line + "\n" for line in lines)


def write_labels(path, utterances) -> None:
    Path(path).write_text(format_labels(utterances), encoding="utf-8")


@dataclass(frozen=True)
class LabelRecord:
    utt_id: str
    phrase_label: int
    trigger_end_frame: int
    tokens: list


def parse_labels(text: str, vocab_size: int | None = None) -> list[LabelRecord]:
    records = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"line {n}: expected 4 tab-separated fields, got {len(parts)}")
        utt_id, label, end, toks = parts
        try:
            label_i = int(label)
            end_i = int(end)
            tokens = [int(t) for t in toks.split()]
        except ValueError as exc:
            raise FormatError(f"line {n}: {exc}") from None
        if label_i not in (0, 1):
            raise FormatError(f"line {n}: phrase label must be 0 or 1, got {label_i}")
        if end_i < 0:
            raise FormatError(f"line {n}: negative trigger_end_frame")
        bad = [t for t in tokens if t < 0 or (vocab_size is not None and t >= vocab_size)]
        if bad:
            raise FormatError(f"line {n}: token ids out of range: {bad}")
        records.append(LabelRecord(utt_id, label_i, end_i, tokens))
    return records


def read_labels(path, vocab_size: int | None = None) -> list[LabelRecord]:
    return parse_labels(Path(path).read_text(encoding="utf-8"), vocab_size)


def write_corpus(corpus: Corpus, spec: CorpusSpec, out_dir) -> None:
    """Lay out ``out_dir/{train,dev,test}/<utt_id>.feat`` plus ``labels.tsv`` and ``corpus.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.txt").write_text(spec.to_text(), encoding="utf-8")
    for name in SPLITS:
        d = out / name
        d.mkdir(exist_ok=True)
        utts = corpus.split(name)
        for u in utts:
            write_features(d / f"{u.utt_id}.feat", u.features)
        write_labels(d / "labels.tsv", utts)


def read_split(corpus_dir, name: str, vocab_size: int | None = None) -> list[Utterance]:
    d = Path(corpus_dir) / name
    records = read_labels(d / "labels.tsv", vocab_size)
    return [Utterance(r.utt_id, read_features(d / f"{r.utt_id}.feat"), r.tokens, r.phrase_label,
                      r.trigger_end_frame) for r in records]


def read_corpus_spec(corpus_dir) -> CorpusSpec:
    return CorpusSpec.from_mapping(parse_key_values(
        (Path(corpus_dir) / "corpus.txt").read_text(encoding="utf-8")))
