"""Counter-based random streams.

Every stochastic unit of work (one trajectory, one loading cycle, one
Ramsey shot) draws from its own Philox stream keyed by ``(seed, purpose,
index)``.  Streams never depend on evaluation order, so results are
identical for any number of workers.
"""

import numpy as np

# purpose keys
THERMAL = 1
LOADING = 2
TRAJECTORY = 3
RETENTION = 4
COUNTS = 5
RAMSEY = 6
FIELD_NOISE = 7
RABI_JITTER = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the work unit ``key`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
