"""Domain-separated counter-based RNG streams.

Every subcommand derives all of its randomness from a single user seed.
Streams are keyed by (seed, domain, index) through a Philox key, so
independent consumers (data blocks, training steps, sampler
trajectories) never share a stream and any partitioning across workers
reproduces serial output bit-for-bit.
"""

from __future__ import annotations

import numpy as np

DOMAIN_DATA = 0
DOMAIN_TRAIN = 1
DOMAIN_HELDOUT = 2
DOMAIN_SAMPLE = 3
DOMAIN_APP = 4

_INDEX_MASK = (1 << 56) - 1


def stream_rng(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    key = np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, (domain << 56) | (index & _INDEX_MASK)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
