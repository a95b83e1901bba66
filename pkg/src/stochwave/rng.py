"""Counter-based random streams.

Every Gaussian draw in the package comes from a Philox generator whose key is
derived from ``(seed, replicate)`` and whose counter starts at a block reserved
for the time step.  Step ``j`` of replicate ``r`` is therefore reproducible in
isolation and independent of the order in which steps or replicates are
generated.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=4096)
def replicate_key(seed: int, replicate: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(int(replicate),))
    k = ss.generate_state(2, dtype=np.uint64)
    return int(k[0]), int(k[1])


def stream(seed: int, replicate: int = 0, step: int = 0) -> np.random.Generator:
    """Generator for one ``(seed, replicate, step)`` cell.

    Steps occupy disjoint counter blocks of size 2**128 draws, so no two cells
    can overlap.
    """
    key = np.array(replicate_key(seed, replicate), dtype=np.uint64)
    counter = np.array([0, 0, int(step) & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def standard_normal(seed: int, replicate: int, step: int, shape) -> np.ndarray:
    return stream(seed, replicate, step).standard_normal(shape)
