"""SplitMix64-based deterministic random numbers.

The toy model's weights and synthetic corpora must be bit-for-bit
reproducible across platforms and numpy versions, so they come from this
self-contained generator instead of numpy's. SplitMix64 keeps a single
64-bit counter state; each step adds the golden-gamma constant and applies
two xor-shift multiplies (Steele et al.'s finalizer). Uniform doubles take
the top 53 bits; normals use the Box-Muller transform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """64-bit-state PRNG; ``seed`` fully determines the stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller (consumes two uniforms)."""
        # First uniform shifted into (0, 1] so log() is finite.
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        """float32 array of i.i.d. normals with standard deviation ``scale``."""
        n = int(np.prod(shape, dtype=np.int64))
        values = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return (values * scale).astype(np.float32).reshape(shape)

    def choice_weighted(self, cumulative: np.ndarray) -> int:
        """Index drawn from a distribution given by its cumulative weights."""
        return int(np.searchsorted(cumulative, self.uniform() * cumulative[-1], side="right"))


def zipf_tokens(length: int, vocab: int, seed: int, exponent: float = 1.1) -> np.ndarray:
    """Deterministic token stream with a Zipf-like frequency skew."""
    if length < 1 or vocab < 1:
        raise ValueError("length and vocab must be positive")
    weights = 1.0 / np.arange(1, vocab + 1, dtype=np.float64) ** exponent
    cumulative = np.cumsum(weights)
    rng = SplitMix64(seed)
    return np.fromiter((rng.choice_weighted(cumulative) for _ in range(length)),
                       dtype=np.int64, count=length)
