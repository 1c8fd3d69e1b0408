"""Counter-based random streams.

Every stream is keyed by ``(root seed, purpose, counters...)`` so that adding
ensemble members or time steps never shifts an existing stream.
"""

import zlib

import numpy as np


def purpose_key(purpose):
    return zlib.crc32(purpose.encode("utf-8"))


def stream(root_seed, purpose, *counters):
    key = (purpose_key(purpose),) + tuple(int(c) for c in counters)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=key))
