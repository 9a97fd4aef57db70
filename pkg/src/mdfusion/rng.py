"""Portable seeded random streams.

splitmix64 expands a u64 seed into xoshiro256++ state; normals come from
Box-Muller. Every draw is defined bit-exactly so that synthetic data and
initializations are reproducible across platforms and implementations.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Mix integer tags into a seed to get an independent child seed."""
    state = seed & MASK64
    state, out = splitmix64(state)
    for tag in tags:
        state, out = splitmix64(out ^ (tag & MASK64))
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256pp:
    """xoshiro256++ generator seeded through splitmix64."""

    __slots__ = ("_s", "_spare")

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s
        self._spare: float | None = None

    @classmethod
    def from_state(cls, state: list[int]) -> Xoshiro256pp:
        """Start from raw 256-bit state (four u64 words), bypassing splitmix64."""
        if len(state) != 4 or not any(state):
            raise ValueError("state must be four u64 words, not all zero")
        obj = cls.__new__(cls)
        obj._s = [w & MASK64 for w in state]
        obj._spare = None
        return obj

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection on the 64-bit output."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normal(self) -> float:
        """Standard normal; Box-Muller pairs, second value cached."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = _TWO_PI * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, *shape: int) -> np.ndarray:
        n = math.prod(shape)
        return np.array([self.normal() for _ in range(n)], dtype=np.float64).reshape(shape)

    def uniforms(self, low: float, high: float, *shape: int) -> np.ndarray:
        n = math.prod(shape)
        span = high - low
        return np.array([low + span * self.uniform() for _ in range(n)], dtype=np.float64).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
