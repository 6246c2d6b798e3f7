"""Named sub-seed derivation.

All randomness in an experiment flows from a single root seed.  Each
consumer (data generation, weight init, label noise, per-epoch batch
order, contour directions) gets its own stream derived from the root so
that changing one consumer never shifts another's draws.
"""

from __future__ import annotations

import numpy as np

# Fixed domain tags; changing any of these changes every derived stream.
DATA = 1
INIT = 2
NOISE = 3
BATCH = 4
CONTOUR = 5
BOUNDS = 6


def derive_rng(root_seed: int, *domain: int) -> np.random.Generator:
    """Return a generator for the stream named by ``domain`` under ``root_seed``."""
    seq = np.random.SeedSequence((int(root_seed),) + tuple(int(d) for d in domain))
    return np.random.Generator(np.random.PCG64(seq))


def sub_seed(root_seed: int, *domain: int) -> int:
    """A plain integer seed for the named stream (for APIs that take ints)."""
    return int(derive_rng(root_seed, *domain).integers(0, 2**63 - 1))
