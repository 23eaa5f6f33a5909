"""Splittable counter-based random streams.

Every random quantity in the package flows from a single master seed through
``stream(seed, role, *key)``: a Philox (counter-based) generator keyed by the
(seed, role, key...) tuple via ``SeedSequence``. Distinct keys give
statistically independent streams, so replica ensembles are reproducible and
order-independent, and a parallel run equals the serial one.
"""
from __future__ import annotations

import numpy as np

# Stream roles. New roles get new codes; codes are frozen for reproducibility.
ROLE_SIMULATE = 1
ROLE_COUPLING = 2
ROLE_PAIRS = 3
ROLE_GENERATOR = 4
ROLE_LIFESPAN = 5
ROLE_SCALING = 6


def stream(seed: int, role: int, *key: int) -> np.random.Generator:
    """Return the generator for (seed, role, key...)."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    ss = np.random.SeedSequence((int(seed), int(role), *(int(k) for k in key)))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng_or_seed, role: int = ROLE_SIMULATE) -> np.random.Generator:
    """Accept either a ready Generator or an integer master seed."""
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return stream(int(rng_or_seed), role)
