"""Seeded random streams.

All randomness goes through numpy's Philox (a counter-based generator) keyed
by ``(seed, stream)``, so datasets and initial weights are reproducible
bit-for-bit from the seed alone and independent of each other.
"""

import numpy as np

STREAM_DATA = 0
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_TEST = 3


def make_rng(seed, stream=0):
    ss = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def batch_indices(n, batch, seed, window):
    """Sample indices of training subset number ``window`` (no replacement)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), STREAM_BATCH, int(window)])))
    return np.sort(rng.permutation(n)[:batch])
