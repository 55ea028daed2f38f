"""Counter-based random substreams.

Every random quantity in the package is drawn from a Philox stream whose key
is derived from an explicit seed plus task indices (simulation, subject,
replicate, ...). A task's draws therefore never depend on how many workers
ran or in which order tasks were scheduled.
"""

from __future__ import annotations

import numpy as np


def _fold(indices: tuple[int, ...]) -> int:
    # SeedSequence hashing keeps distinct index tuples well separated
    ss = np.random.SeedSequence([int(i) & 0xFFFFFFFF for i in indices] + [len(indices)])
    words = ss.generate_state(2, dtype=np.uint64)
    return (int(words[0]) << 64) | int(words[1])


def substream(seed: int, *indices: int) -> np.random.Generator:
    """Return the generator for task ``indices`` under ``seed``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = _fold((seed & 0xFFFFFFFF, seed >> 32, *indices))
    return np.random.Generator(np.random.Philox(key=key))
