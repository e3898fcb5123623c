"""
Counter-based random streams.
Every stream is keyed by (seed, *keys) so any path can be regenerated on its own,
independently of batch layout or thread scheduling.
"""
from typing import Union

import numpy as np

# Stream tags keep different consumers of the same seed apart
FORWARD = 1
MARKS = 2
INVERSE_MOMENT = 3
RESAMPLE = 4
PICARD = 5
FINITE_DIFF = 6
SEMIGROUP = 7
BEL = 8
VARIATIONAL = 9
NORMS = 10
RESIDUAL = 11


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by (seed, *keys)"""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_generator(rng_seed: Union[int, tuple, np.random.Generator]) -> np.random.Generator:
    """Accept a seed, a (seed, key, ...) tuple or an existing generator"""
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    if isinstance(rng_seed, tuple):
        return stream(*rng_seed)
    return stream(int(rng_seed))
