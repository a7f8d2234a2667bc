"""Reproducible, splittable random streams.

Every sampler in the package takes an ``RngStream`` (or a ready
``numpy.random.Generator``).  Streams are backed by Philox, a
counter-based bit generator, keyed through ``SeedSequence`` so that a
``(seed, stream_id)`` pair produces the same numbers on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def split(self, *keys: int) -> "RngStream":
        """Derive an independent child stream; deterministic in ``keys``."""
        ss = np.random.SeedSequence([self.stream_id, *[int(k) & _MASK64 for k in keys]])
        child = int(ss.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, child)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngStream(0 if rng is None else int(rng)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
