"""Deterministic random substreams.

Every stochastic step of the sampler draws from a generator keyed by
``(iteration, stage, block)`` under one root seed, so results do not depend
on how blocks are scheduled across worker threads.
"""
import numpy as np


def root_entropy(seed):
    """Turn an int, SeedSequence or Generator into root entropy."""
    if isinstance(seed, np.random.SeedSequence):
        return seed.entropy
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2**63 - 1))
    if seed is None:
        return np.random.SeedSequence().entropy
    return int(seed)


def substream(entropy, *key):
    ss = np.random.SeedSequence(entropy, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
