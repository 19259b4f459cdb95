"""Counter-based splitting of one master seed into independent streams.

A stream is identified by the master seed plus a tuple of non-negative
integers (task index, block index, ...). The same key always yields the same
stream no matter how work is distributed over processes.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def block_slices(n: int, block: int):
    """Yield ``(block_index, start, stop)`` covering ``range(n)``."""
    for b, start in enumerate(range(0, n, block)):
        yield b, start, min(start + block, n)
