"""Deterministic random streams shared by init, data synthesis, and shuffling.

Everything random in this package flows from SplitMix64 (Steele et al.,
"Fast splittable pseudorandom number generators") so that a stream is fully
reproducible from a single integer seed and can be re-implemented in any
language from this file alone. Gaussians come from the Box-Muller transform
applied to consecutive 53-bit uniforms.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 stream: 64-bit state, one additive constant, two xorshift-multiply mixes."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        """Uniform in [0, 1), 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n). Plain modulo; bias is irrelevant here and
        keeping it branch-free keeps the stream trivially portable."""
        if n <= 0:
            raise ValueError(f"next_below needs n >= 1, got {n}")
        return self.next_u64() % n

    def spawn_seed(self) -> int:
        """Derive a child seed; used to give each tensor/sample its own stream."""
        return self.next_u64()


def normals(count: int, rng: SplitMix64) -> np.ndarray:
    """`count` standard normals via Box-Muller on consecutive uniforms.

    u1 is shifted into (0, 1] so log(u1) is always finite; pairs are
    (r*cos, r*sin) with r = sqrt(-2 ln u1), angle = 2*pi*u2.
    """
    out = np.empty(count, dtype=np.float64)
    i = 0
    while i < count:
        u1 = ((rng.next_u64() >> 11) + 1) * 2.0**-53
        u2 = rng.next_unit()
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        i += 1
        if i < count:
            out[i] = r * math.sin(2.0 * math.pi * u2)
            i += 1
    return out


def uniforms(count: int, rng: SplitMix64) -> np.ndarray:
    return np.array([rng.next_unit() for _ in range(count)], dtype=np.float64)


def shuffled(n: int, rng: SplitMix64) -> list[int]:
    """Fisher-Yates permutation of range(n), drawn high index down."""
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_below(i + 1)
        order[i], order[j] = order[j], order[i]
    return order
