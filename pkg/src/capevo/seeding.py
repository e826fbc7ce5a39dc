"""Keyed, counter-style random streams.

Every stochastic draw in a run is addressed by a key path such as
``(episode_seed, "act", step, attempt)``.  Two rollouts that share a key see
the same variates regardless of how many draws happened elsewhere, which is
what makes shared-seed gating and paired evaluation meaningful.

The generator is SplitMix64; it is small, fast in pure Python and has good
enough statistical quality for Monte-Carlo work at this scale.
"""

from __future__ import annotations

import math

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_int(key) -> int:
    if isinstance(key, str):
        return fnv1a64(key.encode("utf-8"))
    return int(key) & MASK64


def derive(seed: int, *keys) -> int:
    """Derive a child seed from ``seed`` and a path of int/str keys."""
    h = _mix((int(seed) + _GOLDEN) & MASK64)
    for key in keys:
        h = _mix(((h ^ _key_int(key)) + _GOLDEN) & MASK64)
    return h


class Stream:
    """SplitMix64 stream with uniform and Gaussian draws."""

    __slots__ = ("_state", "_spare")

    def __init__(self, seed: int):
        self._state = int(seed) & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        return _mix(self._state)

    def random(self) -> float:
        """Uniform draw in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def normal(self, sigma: float = 1.0) -> float:
        """Gaussian draw (Box-Muller). Always consumes variates, even for sigma=0."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z * sigma
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(_TWO_PI * u2)
        return r * math.cos(_TWO_PI * u2) * sigma


def as_stream(seed_or_stream) -> Stream:
    if isinstance(seed_or_stream, Stream):
        return seed_or_stream
    return Stream(derive(int(seed_or_stream)))
