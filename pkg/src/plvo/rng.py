"""Seeded xorshift64* PRNG.

Used for everything the artifact randomizes (weight init, synthetic scenes,
point subsampling) so that runs are bit-reproducible across platforms and
numpy versions. Not meant for bulk sampling; call counts stay in the tens of
thousands per operation.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # seed scrambler; guarantees a nonzero xorshift state for any seed
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class XorShift64Star:
    """xorshift64* generator: 64-bit state, multiplicative output scrambling."""

    def __init__(self, seed: int):
        state = _splitmix64(int(seed) & _MASK)
        self._state = state if state != 0 else 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x = (x ^ (x << 25)) & _MASK
        x ^= x >> 27
        self._state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform floats in [low, high) with 53-bit resolution."""
        if size is None:
            u = (self.next_u64() >> 11) * 2.0 ** -53
            return low + (high - low) * u
        n = int(np.prod(size)) if not np.isscalar(size) else int(size)
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_u64() >> 11) * 2.0 ** -53
        out = low + (high - low) * out
        return out.reshape(size) if not np.isscalar(size) else out

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, arr: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle along the first axis."""
        for i in range(len(arr) - 1, 0, -1):
            j = self.randint(i + 1)
            arr[[i, j]] = arr[[j, i]]

    def spawn(self, stream: int) -> "XorShift64Star":
        """Independent child generator; deterministic in (seed, stream)."""
        child = XorShift64Star(0)
        child._state = _splitmix64(self._state ^ _splitmix64(stream)) or 1
        return child
