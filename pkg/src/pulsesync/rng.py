"""Deterministic 64-bit splittable PRNG (splitmix64) with named substreams.

Every random quantity in a simulation is drawn from a substream derived
from (master seed, channel label).  Channels are independent: adding an
adversary, or reordering draws on one channel, never perturbs another
channel's sequence.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _hash_label(label: str) -> int:
    # FNV-1a over the UTF-8 bytes; stable across runs and platforms.
    h = 0xCBF29CE484222325
    for b in label.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class Stream:
    """One splitmix64 sequence."""

    __slots__ = ("_state",)

    GOLDEN = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + self.GOLDEN) & _MASK
        return _mix(self._state)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        # Rejection sampling keeps the distribution exact for any span.
        limit = (_MASK + 1) - ((_MASK + 1) % span)
        while True:
            u = self.next_u64()
            if u < limit:
                return lo + (u % span)

    def choice(self, seq):
        return seq[self.randint(0, len(seq) - 1)]


def substream(master_seed: int, label: str) -> Stream:
    """Derive the stream for one (seed, channel) pair."""
    return Stream(_mix(master_seed & _MASK) ^ _hash_label(label))
