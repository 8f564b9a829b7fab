"""Deterministic random-stream splitting.

The child stream for item ``i`` under parent seed ``s`` is
``np.random.default_rng([s, i])``: numpy's SeedSequence hashes the entropy
pair, so each example gets an independent stream that does not depend on how
work is batched or scheduled.
"""

from __future__ import annotations

import numpy as np


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


class StreamBank:
    """Duck-typed stand-in for ``np.random.Generator`` over a batch.

    Row ``k`` of every draw comes from generator ``k``, so results for an
    example are identical whether it is processed alone or inside a batch.
    """

    def __init__(self, generators):
        self.generators = list(generators)

    @classmethod
    def for_items(cls, seed: int, indices) -> "StreamBank":
        return cls(child_rng(seed, i) for i in indices)

    def __len__(self):
        return len(self.generators)

    def _check(self, shape):
        shape = tuple(shape)
        if not shape or shape[0] != len(self.generators):
            raise ValueError(f"draw shape {shape} does not lead with batch size {len(self.generators)}")
        return shape

    def standard_normal(self, shape):
        shape = self._check(shape)
        return np.stack([g.standard_normal(shape[1:]) for g in self.generators])

    def uniform(self, low=0.0, high=1.0, size=None):
        shape = self._check(size)
        return np.stack([g.uniform(low, high, shape[1:]) for g in self.generators])

    def split(self, start: int, stop: int) -> "StreamBank":
        return StreamBank(self.generators[start:stop])
