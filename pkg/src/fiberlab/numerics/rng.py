"""Counter-based random streams.

Each (seed, stream) pair keys an independent Philox generator, so parallel
chains draw reproducibly regardless of scheduling order.
"""

from __future__ import annotations

import numpy as np


def stream_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
