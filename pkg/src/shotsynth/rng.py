"""SplitMix64: a tiny, portable, seedable generator.

Datasets are defined by the exact stream this produces, so the algorithm is
spelled out here rather than borrowed from a library whose stream may change
between versions.  Reference constants follow Steele, Lea and Flood (2014).
"""

from __future__ import annotations

import hashlib
from fractions import Fraction
from typing import Sequence

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    @classmethod
    def from_key(cls, *parts: object) -> "SplitMix64":
        """Seed from the SHA-256 of the ``repr`` of ``parts`` (first 8 bytes, big-endian)."""
        digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
        return cls(int.from_bytes(digest[:8], "big"))

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def next_u53(self) -> int:
        return self.next_u64() >> 11

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return self.next_u53() / float(1 << 53)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, no modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def choose_weighted(self, weights: Sequence[Fraction]) -> int:
        """Index ``i`` with probability ``weights[i]``; weights must sum to 1.

        The draw is compared against exact cumulative fractions, so the choice
        does not depend on floating-point rounding.
        """
        return self.choose_threshold(cumulative_thresholds(weights))

    def choose_threshold(self, thresholds: Sequence[int]) -> int:
        u = self.next_u53()
        for i, t in enumerate(thresholds):
            if u < t:
                return i
        return len(thresholds) - 1


def cumulative_thresholds(weights: Sequence[Fraction]) -> tuple[int, ...]:
    """``ceil(c * 2**53)`` for each cumulative weight ``c``.

    For an integer draw ``u``, ``u < c * 2**53`` iff ``u < ceil(c * 2**53)``.
    """
    out = []
    cumulative = Fraction(0)
    for w in weights:
        cumulative += w
        scaled = cumulative * (1 << 53)
        out.append(-(-scaled.numerator // scaled.denominator))
    return tuple(out)
