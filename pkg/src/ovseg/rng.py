"""SplitMix64 pseudo-random generator.

Every piece of randomness in this package (scene geometry, splits, weight
initialization, batch sampling) is drawn from this generator so that datasets
and training runs are reproducible bit-for-bit from a 64-bit seed.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 finalizer (avalanches a 64-bit value)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 stream over 64-bit state."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """Vectorized batch of `n` next_u64 draws; advances the stream by n."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        z = np.uint64(self.state) + steps
        self.state = int(z[-1]) if n > 0 else self.state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by modular reduction (desk-scale n)."""
        if n <= 0:
            raise ValueError("randint requires n > 0")
        return self.next_u64() % n

    def randrange(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.randint(hi - lo + 1)

    def next_double(self) -> float:
        """Uniform double in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_double()

    def uniform_array(self, shape: tuple[int, ...] | int, lo: float, hi: float) -> np.ndarray:
        """Array of uniforms filled in row-major order."""
        n = int(np.prod(shape))
        u = (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def split(self, index: int) -> "SplitMix64":
        """Derive an independent child stream; the parent state is untouched.

        Used to parallelize dataset generation over scene indices without
        changing the per-scene byte stream.
        """
        return SplitMix64(mix64(self.state ^ mix64(((index + 1) * GOLDEN) & MASK64)))


def sample_distinct(rng: SplitMix64, n: int, k: int) -> list[int]:
    """k distinct indices from [0, n), in draw order (rejecting repeats)."""
    if k > n:
        raise ValueError(f"cannot draw {k} distinct values from {n}")
    picked: list[int] = []
    while len(picked) < k:
        idx = rng.randint(n)
        if idx not in picked:
            picked.append(idx)
    return picked
