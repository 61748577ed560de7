"""Seeded random substreams.

Every stochastic stage draws from a generator keyed by ``(seed, domain,
index)`` so results do not depend on evaluation order or thread count.
"""

from __future__ import annotations

import numpy as np

TRACE = 1
FRAME = 2
DRIFT = 3
EXPERIMENT = 4


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)]))
