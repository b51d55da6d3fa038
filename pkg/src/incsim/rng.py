"""Named, reproducible random streams.

All randomness flows through numpy's PCG64 bit generator (a 64-bit
permuted congruential generator, O'Neill 2014). A stream is identified by an
integer seed plus a tuple of string/int keys; keys are folded into a
``SeedSequence`` via CRC32 so the same (seed, keys) pair yields the same
stream on every platform, and different keys give independent streams.
"""

from __future__ import annotations

import zlib

import numpy as np


def _fold(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_fold(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *keys) -> int:
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
