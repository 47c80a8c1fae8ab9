"""Dense float64 linear algebra, stable probability transforms and seeded RNG streams.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; probability
vectors are 1-D arrays (or rows of a 2-D array) that sum to one.
"""

from __future__ import annotations

import zlib
from typing import Any

import numpy as np

from sfosda.errors import InvalidInputError

EPS = 1e-12
PROB_ATOL = 1e-9


# ----------------------------------------------------------------------------
# matrices
# ----------------------------------------------------------------------------

def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape != b.shape:
        raise InvalidInputError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def scale(a: np.ndarray, c: float) -> np.ndarray:
    return as_matrix(a) * float(c)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


# ----------------------------------------------------------------------------
# probability transforms
# ----------------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis; accepts a vector or a batch of rows."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] < 2:
        raise InvalidInputError(f"softmax needs at least 2 logits per row, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input has non-finite entries")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def check_prob(p, name: str = "p") -> np.ndarray:
    """Validate a probability vector (or rows of them) and return it as float64."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or p.shape[-1] < 2:
        raise InvalidInputError(f"{name} must have at least 2 classes, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < -PROB_ATOL) or np.any(p > 1 + PROB_ATOL):
        raise InvalidInputError(f"{name} has entries outside [0, 1]")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_ATOL):
        raise InvalidInputError(f"{name} does not sum to 1")
    return p


def xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x * log(y) with the convention 0 * log(anything) = 0."""
    out = np.zeros(np.broadcast(x, y).shape)
    mask = np.broadcast_to(x > 0, out.shape)
    xb = np.broadcast_to(x, out.shape)
    yb = np.broadcast_to(y, out.shape)
    out[mask] = xb[mask] * np.log(yb[mask])
    return out


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q); q clamped below by EPS."""
    q = np.maximum(q, EPS)
    return np.sum(xlogy(p, p) - xlogy(p, q), axis=-1)


def kl_divergence(p, q) -> float:
    p = check_prob(p, "p")
    q = check_prob(q, "q")
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(kl_rows(p, q))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    return -np.sum(xlogy(p, p), axis=-1)


def entropy(p) -> float:
    """Shannon entropy in nats."""
    return float(entropy_rows(check_prob(p)))


# ----------------------------------------------------------------------------
# randomness
# ----------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 generator with independent named sub-streams.

    ``Rng(seed).stream("augment")`` always yields the same sequence for a given
    seed and name, regardless of how much any other stream has been consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self._key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def stream(self, name: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    # thin delegation, keeps call sites short
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def get_state(self) -> dict[str, Any]:
        return {"seed": self.seed, "key": list(self._key), "bit_generator": self.gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng.gen.bit_generator.state = state["bit_generator"]
        return rng
