"""Portable deterministic pseudo-random generation.

Datasets, weight initialization, and shuffles all draw from xoshiro256**
seeded through splitmix64, so one integer seed reproduces the exact same
byte stream on every platform and Python build.  NumPy generators are
deliberately not used for anything that ends up in an artifact file.

Seeding expansion: the 64-bit seed (after folding in an optional stream id,
see :class:`PortableRng`) initializes a splitmix64 walk whose first four
outputs become the xoshiro256** state words.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_STREAM_MULT = 0x9E3779B97F4A7C15  # golden-ratio increment, reused for stream folding


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (output, next_state)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)), state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class PortableRng:
    """xoshiro256** with splitmix64 seed expansion.

    ``stream`` selects an independent substream for the same seed (e.g.
    parameter initialization vs. dataset shuffling) by folding
    ``stream * golden_ratio`` into the seed before expansion.
    """

    __slots__ = ("_s0", "_s1", "_s2", "_s3", "_spare_normal")

    def __init__(self, seed: int, stream: int = 0):
        mixed = (int(seed) ^ ((int(stream) * _STREAM_MULT) & _MASK64)) & _MASK64
        words = []
        state = mixed
        for _ in range(4):
            out, state = _splitmix64(state)
            words.append(out)
        if not any(words):  # xoshiro state must not be all zero
            words[0] = 1
        self._s0, self._s1, self._s2, self._s3 = words
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform float64 in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes draws in a fixed order."""
        if self._spare_normal is not None:
            value = self._spare_normal
            self._spare_normal = None
            return value
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = 2.0 * math.pi * u2
        self._spare_normal = radius * math.sin(angle)
        return radius * math.cos(angle)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        draw = self.next_u64()
        while draw >= limit:
            draw = self.next_u64()
        return draw % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices from range(population), order randomized."""
        if k > population:
            raise ValueError(f"cannot sample {k} from population {population}")
        pool = list(range(population))
        self.shuffle(pool)
        return pool[:k]
