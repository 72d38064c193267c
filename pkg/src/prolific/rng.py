"""Counter-based random streams keyed by (seed, block, stream kind).

Every consumer asks for a generator by key instead of sharing one, so the
draws a block receives do not depend on how blocks are scheduled across
workers.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    INITIAL = 0
    BACKBONE = 1
    TRANSITION = 2
    RAIN = 3
    DISCONTINUOUS = 4
    BRANCH_POINT = 5
    MOTION = 6
    EVENTS = 7


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for ``seed`` and an integer key path."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def block_rng(seed: int, block: int, stream: Stream) -> np.random.Generator:
    return keyed_rng(seed, block, int(stream))
