"""splitmix64, the only source of randomness in the package."""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """Portable 64-bit generator; one instance per episode.

    >>> SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF
    True
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        # plain modulo; the bias is part of the reproducible contract
        return self.next_u64() % n

    def symmetric(self, bound: int) -> int:
        """Integer uniform in [-bound, bound]."""
        return self.next_u64() % (2 * bound + 1) - bound

    def chance_ppm(self, ppm: int) -> bool:
        return self.next_u64() % 1_000_000 < ppm


def derive_seed(seed: int, stream: int) -> int:
    """Seed for an independent side stream (e.g. perception noise)."""
    return (seed ^ (stream * GOLDEN_GAMMA)) & MASK64
