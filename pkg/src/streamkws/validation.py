"""Input checks for variable-length feature sequences, shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError


def check_sequence(x, n_features: int | None = None, dtype=np.float64, name: str = "X") -> np.ndarray:
    """Return ``x`` as a finite, non-empty (T, F) array of ``dtype``."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D (frames, features) array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} has no frames")
    if n_features is not None and arr.shape[1] != n_features:
        raise ShapeError(f"{name} has {arr.shape[1]} features, expected {n_features}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_sequences(X, n_features: int | None = None, dtype=np.float64) -> list[np.ndarray]:
    """Validate a collection of utterances; all must share one feature dimension.

    A single 3-D array of equal-length utterances is accepted as well.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ShapeError("expected a list of (frames, features) arrays, got one 2-D array; "
                         "wrap a single utterance in a list")
    seqs = [check_sequence(x, n_features, dtype, name=f"X[{i}]") for i, x in enumerate(X)]
    if not seqs:
        raise ValueError("X contains no utterances")
    dims = {s.shape[1] for s in seqs}
    if len(dims) > 1:
        raise ShapeError(f"utterances disagree on feature dimension: {sorted(dims)}")
    return seqs


def check_phrase_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ShapeError(f"y must have shape ({n_samples},), got {y.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("phrase labels must be 0 (false trigger) or 1 (true trigger)")
    return y.astype(np.int64)


def check_token_lists(tokens, n_samples: int, vocab_size: int | None = None) -> list[list[int]]:
    tokens = [list(map(int, t)) for t in tokens]
    if len(tokens) != n_samples:
        raise ShapeError(f"got {len(tokens)} token lists for {n_samples} utterances")
    for i, seq in enumerate(tokens):
        if any(t < 0 or (vocab_size is not None and t >= vocab_size) for t in seq):
            raise ValueError(f"tokens[{i}] has ids outside [0, {vocab_size})")
    return tokens
