"""Dense numeric kernels shared by every layer.

Matrices are plain 2-D numpy arrays in C (row-major) order. Helpers here add
explicit shape checks and numerically stable softmax variants on top of numpy.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or a numpy float dtype) to a numpy dtype."""
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    dtype = np.dtype(precision)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    return dtype


def precision_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def as_matrix(x, dtype=None, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check that names both operands."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(a, mask=None) -> np.ndarray:
    """Softmax over the last axis, with optional boolean mask of allowed entries.

    Masked entries come out as exactly 0. Rows are shifted by their maximum over
    allowed entries before exponentiation.
    """
    a = np.asarray(a)
    if mask is None:
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[-mask.ndim:]:
        raise ShapeError(f"mask shape {mask.shape} does not match {a.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("softmax row has no allowed entries")
    masked = np.where(mask, a, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(a, axis=-1, keepdims=False) -> np.ndarray:
    a = np.asarray(a)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(a) -> np.ndarray:
    a = np.asarray(a)
    return a - logsumexp(a, axis=-1, keepdims=True)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 output for a given seed is fixed across platforms and numpy
    releases, which is all the reproducibility contract needs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random_raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs of the bit generator."""
        return self._gen.bit_generator.random_raw(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))
