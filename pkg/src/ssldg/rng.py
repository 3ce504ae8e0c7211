"""Counter-based random streams.

Every random draw in the pipeline comes from a generator keyed by a tuple
such as ``(seed, step, sample_id, stage, class_id)``.  Two streams with
different keys are statistically independent, and the same key always
produces the same numbers, so batch-parallel and sequential execution agree
bit for bit.
"""

from __future__ import annotations

import numpy as np

# stage identifiers
STAGE_GA = 1
STAGE_FA = 2
STAGE_WEAK = 3
STAGE_BATCH = 4
STAGE_INIT = 5
STAGE_PHANTOM_GEOM = 6
STAGE_PHANTOM_INTENSITY = 7
STAGE_SPLIT = 8


class KeyedRNG:
    """A node in a tree of deterministic random streams."""

    __slots__ = ("key",)

    def __init__(self, *key: int):
        self.key = tuple(int(k) for k in key)

    def child(self, *more: int) -> "KeyedRNG":
        return KeyedRNG(*self.key, *more)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([k & 0xFFFFFFFF for k in self.key] + [len(self.key)])
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"KeyedRNG{self.key}"


def truncated_normal(rng: np.random.Generator, mean: float, std: float, width: float = 2.0) -> float:
    """Sample N(mean, std) conditioned on |x - mean| <= width * std (rejection)."""
    if std <= 0:
        return float(mean)
    while True:
        z = rng.standard_normal()
        if abs(z) <= width:
            return float(mean + std * z)
