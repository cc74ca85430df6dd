"""Counter-based random streams, one independent stream per (seed, replica, purpose)."""

from __future__ import annotations

from itertools import chain

import numpy as np

PURPOSES = {"init": 0, "dynamics": 1, "sde": 2, "oracle": 3, "check": 4}


def generator(seed: int, replica: int = 0, purpose: str = "dynamics") -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(ss))


class UniformStream:
    """Iterator of Python floats in [0, 1) drawn in batches from a generator."""

    def __init__(self, gen: np.random.Generator, batch: int = 8192, first: int = 32):
        self.gen = gen
        self._it = chain.from_iterable(self._batches(gen, first, batch))
        self.next = self._it.__next__

    @staticmethod
    def _batches(gen, size, cap):
        # batches double up to ``cap``; the concatenated sequence does not
        # depend on the batch sizes, only short runs get cheaper
        while True:
            yield gen.random(size).tolist()
            size = min(2 * size, cap)

    @classmethod
    def from_seed(cls, seed: int, replica: int = 0, purpose: str = "dynamics") -> "UniformStream":
        return cls(generator(seed, replica, purpose))

    def __iter__(self):
        return self._it

    def __next__(self) -> float:
        return self.next()
