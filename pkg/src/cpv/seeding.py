"""Deterministic seed derivation.

Every random decision in the project draws from a numpy Generator whose seed is
derived from (root seed, purpose tag, indices...) via SeedSequence. Worker count
and evaluation order therefore never change results: the stream for pair i or
episode i is a pure function of the root seed and i.
"""
from __future__ import annotations

import numpy as np

# Purpose tags keep unrelated streams from colliding when they share a root seed.
TASK = 1
REF = 2
DEMO = 3
ENV = 4
INIT = 5
BATCH = 6
SPLIT = 7
EVAL_BATCH = 8
EPISODE = 9
PROBE = 10


def derive_seed(*keys: int) -> int:
    """Collapse a (root, tag, index...) key tuple into a stable 64-bit seed."""
    entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
