"""Splittable random streams keyed by (purpose, stratum) off one user seed."""
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence]

# First element of every spawn key.
EULER_STREAM = 0
FORWARD_STREAM = 1
BACKWARD_STREAM = 2
BERNOULLI_STREAM = 3


def seed_sequence(seed: SeedLike, *key: int) -> np.random.SeedSequence:
    """Child of ``seed`` at ``key``; the same (seed, key) always gives the same stream."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(key))
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def stream(seed: SeedLike, *key: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *key))
