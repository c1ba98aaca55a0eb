"""Deterministic seed derivation for parallel-safe reproducibility.

Every stochastic component takes an explicit integer seed. Child seeds are
derived from a parent seed plus a fixed integer path, so results never depend
on execution order or worker count.
"""

from __future__ import annotations

import numpy as np

# Stream ids used to split one seed into independent sub-streams.
STREAM_BASIS = 1
STREAM_BOOT = 2
STREAM_MEDIAN = 3
STREAM_CV = 4
STREAM_REP = 5
STREAM_KAPPA = 6
STREAM_ENV = 7
STREAM_SCHEDULE = 8
STREAM_EXPLORE = 9
STREAM_DETECT = 10
STREAM_RANDOM_CP = 11
STREAM_KERNEL = 12
STREAM_DATA = 13


def derive_seed(master: int, *path: int) -> int:
    """Collapse ``(master, *path)`` into a single 64-bit child seed."""
    entropy = (int(master),) + tuple(int(p) for p in path)
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator seeded by ``seed`` (optionally descended along ``path``)."""
    if path:
        seed = derive_seed(seed, *path)
    return np.random.Generator(np.random.PCG64(seed))
