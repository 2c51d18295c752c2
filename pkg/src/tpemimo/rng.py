"""Deterministic random substreams keyed by (master seed, purpose, indices).

Every random draw in the package goes through :func:`substream`, so any
sample or trial can be regenerated on its own, on any worker, without
replaying the draws that precede it.
"""

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    """Stable 32-bit integer for a purpose tag (independent of PYTHONHASHSEED)."""
    return zlib.crc32(tag.encode("utf-8"))


def substream(master_seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, tag, *indices)``."""
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(tag_code(tag), *(int(i) for i in indices)),
    )
    return np.random.Generator(np.random.PCG64(seq))
