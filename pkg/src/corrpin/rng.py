"""Reproducible random streams.

Stream ``i`` of master seed ``s`` is a Philox (counter-based) generator keyed by
``SeedSequence(s, spawn_key=(i,))``, so replica ``i`` draws the same numbers
regardless of how many replicas run or in which order.
"""

import numpy as np


def stream(master_seed: int, index: int, *sub: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index), *map(int, sub)))
    return np.random.Generator(np.random.Philox(ss))


def streams(master_seed: int, count: int, *sub: int) -> list[np.random.Generator]:
    return [stream(master_seed, i, *sub) for i in range(count)]
