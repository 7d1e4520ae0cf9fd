"""Deterministic, platform-independent PRNG (splitmix64-seeded xoshiro256**).

The whole pipeline (weight init, batch sampling) draws from this generator so
that a fixed seed reproduces every artifact byte for byte. The integer stream
is pure 64-bit arithmetic and therefore identical on any platform; floating
draws only apply exact power-of-two scaling on top of it (Gaussians go through
libm log/sqrt/cos via the Box-Muller transform).
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator seeded from a 64-bit seed via splitmix64.

    Single-owner mutable state: never share one instance across threads.
    Workers should each hold ``rng.child(worker_index)``.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._spare: float | None = None
        state = self.seed
        s = []
        for _ in range(4):
            state, out = _splitmix64_next(state)
            s.append(out)
        # xoshiro256** must not start from the all-zero state; with splitmix64
        # seeding this cannot happen, but guard anyway.
        if not any(s):
            s[0] = _GOLDEN
        self._s = s

    def next_u64(self) -> int:
        """Next raw 64-bit output."""
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits (exact scaling)."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (unbiased)."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine branch, one pair per call)."""
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value
        u1 = self.uniform()
        u2 = self.uniform()
        # u1 = 0 would take log(0); shift into (0, 1].
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Array of iid N(0, std^2) draws, filled in C order."""
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal()
        return (out * std).astype(dtype).reshape(shape)

    def integers(self, n: int, count: int) -> np.ndarray:
        """`count` uniform integers in [0, n) as int64."""
        return np.array([self.below(n) for _ in range(count)], dtype=np.int64)

    def child(self, index: int) -> "Rng":
        """Derive an independent generator from (seed, index).

        The child seed mixes the parent seed and the index through two
        splitmix64 finalizer passes, so children of distinct indices (and of
        distinct parents) start from decorrelated states.
        """
        if index < 0:
            raise ValueError(f"child index must be >= 0, got {index}")
        _, a = _splitmix64_next(self.seed)
        _, b = _splitmix64_next((index + 1) & _MASK64)
        return Rng(a ^ b)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
