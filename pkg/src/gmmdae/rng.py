"""Seed expansion.

Every consumer of randomness gets its own generator, derived from the one
master seed plus a fixed text tag, so adding a consumer never shifts the
stream another consumer sees.
"""

import zlib

import numpy as np


def derive_rng(seed: int, tag: str) -> np.random.Generator:
    key = zlib.crc32(tag.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))
