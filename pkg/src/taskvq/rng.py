"""Seeding policy: one counter-based generator per run, derived streams per use.

No code in this package touches numpy's global RNG. Every consumer asks for a
generator derived from (seed, *stream labels), so adding a new randomness
consumer never perturbs existing streams.
"""

import zlib

import numpy as np


def make_rng(seed, *streams):
    """Return a Philox generator for the given seed and stream labels.

    Labels may be strings or ints; the same (seed, labels) always yields the
    same stream.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in streams:
        if isinstance(s, str):
            entropy.append(zlib.crc32(s.encode("utf-8")))
        else:
            entropy.append(int(s) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
