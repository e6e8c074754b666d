"""Seeded, splittable random streams.

Every consumer asks for a generator by ``(seed, *keys)``; the same pair always
yields the same stream, and distinct keys give independent streams.
"""

import zlib

import numpy as np


def stream(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed)] + [zlib.crc32(str(k).encode("utf-8")) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
