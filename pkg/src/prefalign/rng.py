"""Deterministic 64-bit PRNG for all dataset shuffling.

SplitMix64 (Steele/Lea/Vigna) keeps exactly 64 bits of state and is trivially
portable, so every shuffle in this package reproduces bit-exactly across
platforms and Python versions. Shuffles use Fisher-Yates with rejection
sampling for the index draw (no modulo bias).
"""

from __future__ import annotations

from typing import Sequence, TypeVar

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


class SplitMix64:
    """SplitMix64 generator: state advances by a fixed odd gamma, output is a
    64-bit finalizer of the state."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of entropy."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(seed: int, stream: int) -> int:
    """A decorrelated child seed for an independent shuffle stream."""
    g = SplitMix64(seed)
    out = 0
    for _ in range(stream + 1):
        out = g.next_u64()
    return out


def shuffled(items: Sequence[T], seed: int) -> list[T]:
    """Fisher-Yates shuffle of a copy of ``items``, driven by SplitMix64."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.randrange(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
