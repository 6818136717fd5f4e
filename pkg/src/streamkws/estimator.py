"""scikit-learn style wrapper around the encoder, training loop and streaming runtime."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, forward_full, load_checkpoint, save_checkpoint
from .runtime import StreamingSession, tail_score
from .training import TrainConfig, train
from .validation import check_phrase_labels, check_sequences, check_token_lists


@dataclass
class _Example:
    utt_id: str
    features: np.ndarray
    tokens: list
    phrase_label: int


class StreamingTriggerDetector(ClassifierMixin, BaseEstimator):
    """Joint trigger detector / false-trigger mitigator.

    ``X`` is a list of (frames, features) arrays, ``y`` the utterance-level
    phrase label (1 true trigger, 0 false trigger). Optional ``tokens`` give the
    per-utterance CTC targets for the phonetic branch; without them the CTC
    weight is set to zero.

    Example::

        det = StreamingTriggerDetector(epochs=10).fit(X, y, tokens=tokens)
        det.predict_proba(X_test)[:, 1]
        session = det.stream(threshold=0.5, trigger_frame=24)
    """

    def __init__(self, d_model=32, n_heads=4, n_layers=2, ffn_dim=64, lstm_hidden=32, shift=8,
                 phrase_loss="frame_ce", lstm_in_phrase_branch=True, lambda_ctc=1.0,
                 lambda_phrase=1.0, dropout=0.1, precision="f32", vocab_size=None, epochs=30,
                 lr=1e-3, batch_size=8, clip_norm=5.0, threshold=0.5, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_dim = ffn_dim
        self.lstm_hidden = lstm_hidden
        self.shift = shift
        self.phrase_loss = phrase_loss
        self.lstm_in_phrase_branch = lstm_in_phrase_branch
        self.lambda_ctc = lambda_ctc
        self.lambda_phrase = lambda_phrase
        self.dropout = dropout
        self.precision = precision
        self.vocab_size = vocab_size
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self, n_features, vocab_size, lambda_ctc) -> ModelConfig:
        return ModelConfig(
            feature_dim=n_features, d_model=self.d_model, n_heads=self.n_heads,
            n_layers=self.n_layers, ffn_dim=self.ffn_dim, vocab_size=vocab_size,
            lstm_hidden=self.lstm_hidden, shift=self.shift, phrase_loss=self.phrase_loss,
            lstm_in_phrase_branch=self.lstm_in_phrase_branch, lambda_ctc=lambda_ctc,
            lambda_phrase=self.lambda_phrase, dropout=self.dropout, precision=self.precision)

    def fit(self, X, y, tokens=None, X_dev=None, y_dev=None, tokens_dev=None):
        seqs = check_sequences(X)
        y = check_phrase_labels(y, len(seqs))
        lambda_ctc = self.lambda_ctc
        if tokens is None:
            tokens = [[] for _ in seqs]
            lambda_ctc = 0.0
        tokens = check_token_lists(tokens, len(seqs), self.vocab_size)
        vocab = self.vocab_size or max([t for seq in tokens for t in seq], default=0) + 1
        config = self._model_config(seqs[0].shape[1], vocab, lambda_ctc)
        corpus = [_Example(f"fit-{i}", s, t, int(lab)) for i, (s, t, lab) in enumerate(zip(seqs, tokens, y))]
        dev = None
        if X_dev is not None:
            dseqs = check_sequences(X_dev, config.feature_dim)
            dy = check_phrase_labels(y_dev, len(dseqs))
            dtok = tokens_dev if tokens_dev is not None else [[] for _ in dseqs]
            dev = [_Example(f"dev-{i}", s, t, int(lab)) for i, (s, t, lab) in enumerate(zip(dseqs, dtok, dy))]
        tc = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                         clip_norm=self.clip_norm, seed=self.random_state)
        result = train(config, corpus, train_config=tc, dev=dev)
        self.config_ = config
        self.params_ = result.params
        self.metrics_ = result.metrics
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = config.feature_dim
        return self

    def _check(self, X):
        check_is_fitted(self, "params_")
        return check_sequences(X, self.n_features_in_)

    def decision_function(self, X) -> np.ndarray:
        """Smoothed true-trigger score at the last frame of each utterance."""
        return np.array([tail_score(forward_full(x, self.params_, self.config_).phrase_positive_prob())
                         for x in self._check(X)])

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= self.threshold).astype(np.int64)

    def transform(self, X) -> list[np.ndarray]:
        """Per-frame encoder embeddings of each utterance."""
        return [forward_full(x, self.params_, self.config_).embeddings for x in self._check(X)]

    def stream(self, threshold=None, trigger_frame: int = 0) -> StreamingSession:
        """Fresh incremental session; push frames and read per-frame decisions."""
        check_is_fitted(self, "params_")
        return StreamingSession(self.params_, self.config_,
                                self.threshold if threshold is None else threshold, trigger_frame)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(self.params_, self.config_, path)

    @classmethod
    def from_checkpoint(cls, path, **params) -> "StreamingTriggerDetector":
        weights, config = load_checkpoint(path)
        est = cls(d_model=config.d_model, n_heads=config.n_heads, n_layers=config.n_layers,
                  ffn_dim=config.ffn_dim, lstm_hidden=config.lstm_hidden, shift=config.shift,
                  phrase_loss=config.phrase_loss, lstm_in_phrase_branch=config.lstm_in_phrase_branch,
                  lambda_ctc=config.lambda_ctc, lambda_phrase=config.lambda_phrase,
                  dropout=config.dropout, precision=config.precision,
                  vocab_size=config.vocab_size, **params)
        est.config_ = config
        est.params_ = weights
        est.metrics_ = []
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = config.feature_dim
        return est
