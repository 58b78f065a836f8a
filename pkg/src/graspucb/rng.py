"""Counter-based random streams.

Every stochastic draw in the package goes through :func:`stream`, which keys a
Philox generator by ``(seed, tag, *indices)``. There is no global RNG, so the
same key always yields the same numbers no matter which thread asks or in
which order.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def tag_id(tag: str) -> int:
    """Stable 32-bit id for a purpose tag (CRC32, not Python's salted hash)."""
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator keyed by ``(seed, tag, *indices)``."""
    entropy = [int(seed) & _MASK64, tag_id(tag)] + [int(i) & _MASK64 for i in indices]
    ss = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: str, *indices: int) -> int:
    """Derive a child 63-bit seed from a parent key."""
    return int(stream(seed, tag, *indices).integers(0, 2**63 - 1))
