"""Morton (Z-order) keys and key-range domain decomposition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BITS = 10


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits of ``v``."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def interleave(q) -> np.ndarray:
    """Morton code of integer cell coordinates ``q`` (..., 3); x is bit 0."""
    q = np.asarray(q)
    return _spread_bits(q[..., 0]) | (_spread_bits(q[..., 1]) << np.uint64(1)) \
        | (_spread_bits(q[..., 2]) << np.uint64(2))


def quantize(pos, lower, upper, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Cell coordinates on a 2**bits lattice; positions outside are clamped."""
    if not 1 <= bits <= 21:
        raise ValueError("bits per axis must be in [1, 21]")
    pos = np.asarray(pos, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    extent = np.asarray(upper, dtype=np.float64) - lower
    scaled = np.floor((pos - lower) / extent * (1 << bits))
    return np.clip(scaled, 0, (1 << bits) - 1).astype(np.uint64)


def morton_key(pos, lower, upper, bits: int = DEFAULT_BITS):
    keys = interleave(quantize(pos, lower, upper, bits))
    return int(keys) if keys.ndim == 0 else keys


@dataclass
class MortonPartition:
    """Rank ``r`` owns keys in ``[splits[r], splits[r + 1])``."""

    lower: np.ndarray
    upper: np.ndarray
    splits: np.ndarray
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype=np.uint64)
        if self.splits[0] != 0 or int(self.splits[-1]) != 1 << (3 * self.bits):
            raise ValueError("key ranges must cover the whole key space")
        if np.any(np.diff(self.splits.astype(np.int64)) < 0):
            raise ValueError("key ranges must be non-decreasing")

    @property
    def num_ranks(self) -> int:
        return len(self.splits) - 1

    @classmethod
    def balanced(cls, positions, num_ranks: int, lower, upper, bits: int = DEFAULT_BITS):
        """Key ranges holding (nearly) equal numbers of ``positions``."""
        keys = np.sort(np.atleast_1d(morton_key(positions, lower, upper, bits)))
        n = len(keys)
        inner = [int(keys[(r * n) // num_ranks]) if n else 0 for r in range(1, num_ranks)]
        splits = np.array([0, *inner, 1 << (3 * bits)], dtype=np.uint64)
        return cls(lower, upper, splits, bits)

    def key(self, pos):
        return morton_key(pos, self.lower, self.upper, self.bits)

    def owner_of_key(self, key):
        owner = np.searchsorted(self.splits[1:], np.asarray(key, dtype=np.uint64), side="right")
        return int(owner) if np.ndim(owner) == 0 else owner.astype(np.int64)

    def owner_of_particle(self, pos):
        return self.owner_of_key(self.key(pos))
