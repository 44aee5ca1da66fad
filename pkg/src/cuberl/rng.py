"""Seeded random streams.

All randomness in a run flows from a single 64-bit seed. Consumers get
independent streams derived from (seed, stream id) through numpy's
SeedSequence -> PCG64, which has a documented, platform-independent
bit stream. Stream ids are fixed here so that runs are reproducible and
so adding a consumer never shifts the draws of an existing one.
"""

import numpy as np

# Stream ids, one per independent consumer of randomness.
NET_INIT = 1
BATCH_SAMPLING = 2
TARGET_NOISE = 3
EVALUATION = 4
ENV_RESET = 5
BEHAVIOR = 6
MDP_BUILD = 7
Q_NOISE = 8
PAIR_SAMPLING = 9


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Return the PCG64 generator for one consumer of the run seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream_id,))))


def root(seed: int) -> np.random.Generator:
    """Single-consumer generator (dataset generation, standalone resets)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
