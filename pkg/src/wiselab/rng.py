"""Reproducible random streams: splitmix64-seeded xoshiro256**.

Every consumer asks for a stream by ``(seed, purpose, sub)``.  The stream seed
is derived as::

    s = splitmix64_mix(seed ^ fnv1a64(purpose))
    s = splitmix64_mix(s ^ sub)

and the four xoshiro256** state words are the first four outputs of a
splitmix64 generator started at ``s``.  Doubles use the top 53 bits of each
output; Gaussian draws use the Box-Muller transform, consuming one pair of
uniforms per pair of normals (an odd request discards the last normal).
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output function (finalizer) applied to ``z + golden``."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256ss:
    """xoshiro256** 1.0 (Blackman & Vigna), state seeded from splitmix64."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next_u64() for _ in range(4)]

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=np.float64)

    def below(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift; bias is below 2**-40 for n < 2**24."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            u1 = 1.0 - self.random()  # (0, 1], keeps log finite
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(_TWO_PI * u2)
            if i + 1 < n:
                out[i + 1] = r * math.sin(_TWO_PI * u2)
            i += 2
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def sample_without_replacement(self, n: int, m: int) -> list[int]:
        """First ``m`` positions of a partial Fisher-Yates shuffle of ``range(n)``."""
        if m > n:
            raise ValueError("cannot draw more items than available")
        pool = list(range(n))
        for i in range(m):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m]


def stream_seed(seed: int, purpose: str, sub: int = 0) -> int:
    s = splitmix64_mix((seed & MASK64) ^ fnv1a64(purpose))
    return splitmix64_mix(s ^ (sub & MASK64))


def stream(seed: int, purpose: str, sub: int = 0) -> Xoshiro256ss:
    """Independent generator for one ``(purpose, sub)`` pair under ``seed``."""
    return Xoshiro256ss(stream_seed(seed, purpose, sub))
