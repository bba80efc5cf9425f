"""Seeded RNG streams.

Every source of randomness in the simulator is a named stream derived from
a user seed plus integer tags, so results are bit-reproducible and
independent of evaluation order (clients can be processed in parallel
without changing the outcome).
"""
from __future__ import annotations

import numpy as np

# Stream tags for the simulation engine.
INIT = 1            # global model initialization
SELECT = 2          # per-round client selection
STRAGGLER = 3       # per-round straggler assignment
CLIENT = 4          # per-client mini-batch shuffling
CENTRAL_INIT = 5    # centralized reference model init
CENTRAL = 6         # centralized reference model shuffling
MMD_REF = 7         # reference-embedding subsampling

# Stream tags for dataset construction.
DATA_SYNTH = 16
DATA_COUNTS = 17
DATA_SHARD = 18
DATA_DIRICHLET = 19
DATA_SPLIT = 20
DATA_POOL = 21

# Mini-batch shuffle schedule inside local training (see nn.local_train).
EPOCH = 32


def rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a fresh generator for the stream named by (seed, *tags)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence((seed, *tags)))


def derive_seed(seed: int, *tags: int) -> int:
    """Fold (seed, *tags) into a single non-negative integer seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    a, b = np.random.SeedSequence((seed, *tags)).generate_state(2, np.uint64)
    return (int(a) << 64) | int(b)
