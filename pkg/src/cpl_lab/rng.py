"""Seeded random streams.

All randomness uses numpy's counter-based Philox bit generator. Named streams
are derived from a root seed through ``SeedSequence`` with a CRC32 of the
stream name as spawn key, so ``derive_rng(7, "labels")`` is the same stream on
every machine and every run.

Only ``Generator.random`` is used to draw values (see :func:`uniform_index`
and :func:`permutation`); the higher-level Generator helpers are not covered
by numpy's stream-compatibility policy.
"""
import zlib

import numpy as np


def make_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def derive_rng(root_seed, name):
    seq = np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return np.random.Generator(np.random.Philox(seq))


def uniform_index(rng, n):
    """Draw an integer uniformly from ``range(n)``."""
    return min(int(rng.random() * n), n - 1)


def categorical(rng, probs):
    """Inverse-CDF draw from a probability vector."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    idx = min(idx, len(probs) - 1)
    # guard against landing on a zero-probability tail entry after rounding
    while probs[idx] <= 0.0 and idx > 0:
        idx -= 1
    return idx


def permutation(rng, n):
    """Fisher-Yates shuffle of ``range(n)``."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = uniform_index(rng, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
