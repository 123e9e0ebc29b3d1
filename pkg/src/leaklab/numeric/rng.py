"""Seeded, splittable randomness.

Streams are keyed by ``(seed, *labels)`` and backed by numpy's Philox
counter-based bit generator, so a stream's draws do not depend on how many
other streams were consumed before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """A named random stream. ``rng.child("x")`` derives an independent sub-stream."""

    def __init__(self, seed: int, *labels):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(labels)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *(_label_key(lab) for lab in labels)]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, *self.labels, *labels)

    def normal(self, std: float, shape) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, seq):
        return seq[int(self.generator.integers(0, len(seq)))]

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, labels={self.labels})"
