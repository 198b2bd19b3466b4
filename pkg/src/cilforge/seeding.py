"""Counter-based seed derivation.

A single integer seed fans out into independent named streams so that
changing one factor of an experiment (e.g. the batching order) never
perturbs the others.
"""

import numpy as np

STREAMS = {
    "stream": 0,
    "init": 1,
    "batching": 2,
    "calibration": 3,
    "expand": 4,
}


def seed_sequence(seed, *key):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def make_rng(seed, *key):
    """Philox generator keyed by ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *key)))


def derive_rng(seed, name):
    return make_rng(seed, STREAMS[name])


def derive_seed(seed, name):
    """Integer sub-seed for components that take a plain seed."""
    return int(seed_sequence(seed, STREAMS[name]).generate_state(1, dtype=np.uint32)[0])
