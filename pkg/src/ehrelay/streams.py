"""Counter-based random streams.

Every consumer derives its own generator from a tuple of integers
(base seed, role, trial, block, ...), so results do not depend on call
order or on how work is split across threads.
"""

from __future__ import annotations

import numpy as np

# role tags
RELAY_LAYER = 1
TX_LAYER = 2
INITIAL_STATE = 3
CODEBOOK = 4
NOISE = 5
MESSAGES = 6
ENSEMBLE = 7
CHAIN = 8
TRIAL = 9


def stream(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def child_seed(*key) -> int:
    """A 63-bit integer seed derived from ``key``."""
    words = np.random.SeedSequence([int(k) for k in key]).generate_state(2, dtype=np.uint32)
    return (int(words[0]) << 31) ^ int(words[1])


def uniforms_at(seed: int, offset: int, count: int) -> np.ndarray:
    """Uniform draws number ``offset .. offset+count-1`` of the stream keyed by ``seed``.

    Draw ``i`` depends only on ``(seed, i)``, so slicing commutes with generation.
    """
    key = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)
    skip = offset % 4
    gen = np.random.Generator(np.random.Philox(key=key, counter=[offset // 4, 0, 0, 0]))
    return gen.random(skip + count)[skip:]
