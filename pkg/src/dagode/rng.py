"""Seeded random streams.

All randomness in the package goes through ``numpy.random.Generator``
backed by PCG64 (64-bit state).  Independent sub-streams come from
``SeedSequence.spawn`` so per-node or per-task draws never overlap.
"""

import numpy as np


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split(rng, n):
    """Return ``n`` independent child generators of ``rng``."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in rng.bit_generator.seed_seq.spawn(n)]
