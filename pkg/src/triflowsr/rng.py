"""Counter-based random streams.

Every random draw in the package comes from ``stream(seed, stream_id)``:
a Philox generator keyed by the pair, so the sequence depends only on
those two integers and never on global state or platform.
"""

import numpy as np

_MASK = (1 << 64) - 1


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    key = np.array([int(seed) & _MASK, int(stream_id) & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def child_seed(seed: int, *path: int) -> int:
    """Derive a 63-bit seed from a parent seed and an index path."""
    g = stream(seed, 0x5EED)
    value = int(g.integers(0, 1 << 62))
    for p in path:
        value = int(stream(value, int(p)).integers(0, 1 << 62))
    return value
