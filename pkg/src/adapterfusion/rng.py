"""Seed derivation.

Every random draw in the package goes through a ``numpy.random.Generator``
backed by PCG64. Substreams are derived from a 64-bit root seed and a path of
string labels, e.g. ``generator(7, "adapter", "sst")``. Labels are hashed with
CRC32 so the derivation is stable across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_word(label: str | int) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    return zlib.crc32(label.encode("utf-8"))


def derive_seed(seed: int, *labels: str | int) -> int:
    """Return a 64-bit seed for the substream ``labels`` of ``seed``."""
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    entropy.extend(_label_word(lab) for lab in labels)
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & _MASK64


def generator(seed: int, *labels: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
