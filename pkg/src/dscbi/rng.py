"""Counter-based random streams.

Every stream is a NumPy ``Generator`` over the Philox-4x64 counter-based
bit generator.  The 128-bit Philox key is built from the user seed (high
64 bits) and a stream index (low 64 bits); the Philox counter then advances
with each draw.  A replication therefore sees the same random numbers no
matter which worker runs it or in which order replications are scheduled.
"""

from __future__ import annotations

import numpy as np

SEED_LIMIT = 2**64

#: stream-index offset reserved for draws of the limit functional, so they
#: never share a key with skeleton replications at the same seed
LIMIT_STREAM_OFFSET = 2**63


def check_seed(seed):
    """Validate a 64-bit unsigned seed and return it as ``int``."""
    s = int(seed)
    if s != seed or not 0 <= s < SEED_LIMIT:
        raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return s


def stream(seed, index):
    """Return the generator keyed by ``(seed, index)``."""
    s = check_seed(seed)
    i = int(index)
    if not 0 <= i < SEED_LIMIT:
        raise ValueError("stream index out of range")
    return np.random.Generator(np.random.Philox(key=(s << 64) | i))
