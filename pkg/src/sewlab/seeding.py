"""Named sub-seeds derived from one top-level seed."""

import zlib

import numpy as np


def subseed(seed, name):
    """Deterministic 63-bit seed for stream ``name`` under ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng(seed, name):
    return np.random.default_rng(subseed(seed, name))
