"""Derived random streams.

A run owns one 64-bit master seed. Every randomized stage (balancing,
fold splitting, per-fold init and shuffling) pulls an independent child
stream derived from it, so stages can be reordered or parallelized
without perturbing each other's draws.
"""

from __future__ import annotations

import numpy as np

# Fixed child indices of the master seed; order is part of the on-disk
# reproducibility contract and must not change.
STREAM_BALANCE = 0
STREAM_SPLIT = 1
STREAM_FOLDS = 2


def child_seed(master_seed: int, *path: int) -> int:
    """Return a u64 seed for the child stream at ``path`` under the master.

    ``path`` walks the spawn tree, e.g. ``child_seed(s, STREAM_FOLDS, 3)``
    is the stream for fold index 3.
    """
    ss = np.random.SeedSequence(master_seed)
    for index in path:
        ss = ss.spawn(index + 1)[index]
    return int(ss.generate_state(1, np.uint64)[0])


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Generator over the child stream at ``path``."""
    return np.random.default_rng(child_seed(master_seed, *path))
