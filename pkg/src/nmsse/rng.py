"""Counter-based random streams keyed by (master_seed, purpose, indices).

A stream depends only on its key, never on the order in which streams are
created or consumed, so results do not depend on how work is scheduled.
"""

import zlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def purpose_code(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(master_seed, purpose, *indices):
    """Independent Philox generator for one (purpose, indices) key."""
    key = (purpose_code(purpose),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(master_seed) & SEED_MASK, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def streams(master_seed, purpose, indices, *prefix):
    return [stream(master_seed, purpose, *prefix, i) for i in indices]
