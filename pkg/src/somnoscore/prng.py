"""Seedable 64-bit PRNG used for patient splits and batch shuffling.

The generator is SplitMix64 (Steele, Lea & Flood's mix of the Weyl
sequence with variant 13 of the murmur-style finalizer). It is fully
specified here so the exact shuffle order can be reproduced in any
language:

    state' = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state'
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z XOR (z >> 31)

Bounded draws use rejection sampling on the top of the range, and
shuffling is a backwards Fisher-Yates. ``derive_seed(root, i)`` is
defined as the (i+1)-th output of the stream seeded with ``root``;
because the state increment is the Weyl constant this can be computed
in O(1).
"""

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 stream over 64-bit unsigned outputs."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & MASK64
        return _mix(self._state)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def shuffle(self, items: list) -> None:
        """In-place backwards Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(root: int, index: int) -> int:
    """Sub-seed ``index`` of stream ``root``: its (index+1)-th output."""
    if index < 0:
        raise ValueError("index must be nonnegative")
    state = (root + (index + 1) * _GAMMA) & MASK64
    return _mix(state)
