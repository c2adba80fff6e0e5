"""Probability transforms, seeded random streams and a finite-difference oracle.

Tensors are plain float64 ``numpy.ndarray`` objects throughout the package.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np

_SEED_MASK = (1 << 64) - 1


class NonFiniteError(ValueError):
    """Raised when a function under differentiation returns NaN or Inf."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite function value {value!r} at coordinate {index}")
        self.index = index
        self.value = value


def derive_seed(seed: int, *labels) -> int:
    """Hash ``seed`` and ``labels`` into a new 64-bit seed (platform independent)."""
    text = repr((int(seed) & _SEED_MASK, tuple(str(lbl) for lbl in labels)))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """A seeded random stream backed by the counter-based Philox generator.

    A stream is owned by one consumer. Code that fans work out (per sample,
    per epoch) takes ``child(label, ...)`` streams instead of sharing one.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _SEED_MASK
        self.counter = int(counter)
        bitgen = np.random.Philox(key=self.seed)
        if counter:
            bitgen = bitgen.advance(counter)
        self.generator = np.random.Generator(bitgen)

    def child(self, *labels) -> "RngStream":
        return RngStream(derive_seed(self.seed, *labels))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis of ``logits / temperature``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_div(p, q) -> float:
    """KL(p || q) in nats for two probability vectors.

    Zero-mass entries of ``p`` contribute nothing. If ``q`` has no mass where
    ``p`` does, the divergence is ``math.inf``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def sample_beta(alpha: float, rng: RngStream) -> float:
    """Draw one value from the symmetric Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return float(rng.generator.beta(alpha, alpha))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float],
    params,
    eps: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``indices`` restricts the evaluation to a subset of flat coordinates; the
    result then has one entry per requested index. Otherwise the result has
    the shape of ``params``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(theta))
        flat[i] = orig - eps
        f_minus = float(f(theta))
        flat[i] = orig
        if not math.isfinite(f_plus):
            raise NonFiniteError(int(i), f_plus)
        if not math.isfinite(f_minus):
            raise NonFiniteError(int(i), f_minus)
        out[j] = (f_plus - f_minus) / (2.0 * eps)
    if indices is None:
        return out.reshape(theta.shape)
    return out
