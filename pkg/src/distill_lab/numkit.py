"""Numerics substrate: float64 matrices, seeded streams, stable softmax.

Matrices are plain 2-D ``float64`` numpy arrays. Nothing here broadcasts:
shape mismatches raise :class:`InvalidShapeError`.

Random streams use numpy's Philox4x64 counter-based generator. A stream is
identified by ``(seed, stream_id)``; the pair is packed into the 128-bit
Philox key (``seed`` in the low word, ``stream_id`` in the high word), so
distinct stream ids give independent, platform-stable sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1


class InvalidShapeError(ValueError):
    pass


class InvalidTemperatureError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidShapeError(f"{name}: expected 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _check_logits(logits, tau: float) -> np.ndarray:
    if not tau > 0:
        raise InvalidTemperatureError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] == 0 or z.size == 0:
        raise InvalidShapeError(f"logits must be a non-empty vector or batch, got {z.shape}")
    return z


def log_softmax_t(logits, tau: float = 1.0) -> np.ndarray:
    """Row-wise ``log softmax(logits / tau)``; accepts a vector or an N x K batch."""
    z = _check_logits(logits, tau) / tau
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_t(logits, tau: float = 1.0) -> np.ndarray:
    z = _check_logits(logits, tau) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SeededRng:
    """Identifier of a reproducible random stream."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for field in ("seed", "stream_id"):
            v = getattr(self, field)
            if not 0 <= v <= _U64:
                raise ValueError(f"{field} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        key = (self.stream_id << 64) | self.seed
        return np.random.Generator(np.random.Philox(key=key))


def make_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    return SeededRng(seed, stream_id).generator()


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (stable across runs and platforms)."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)
    return int(state[0])


# Stream ids used across the package. Keeping them here avoids accidental reuse.
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_POLICY = 4
STREAM_BOOTSTRAP = 5
STREAM_SPLIT = 6
