import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for the named sub-stream of ``seed``.

    Components draw from their own stream ("cloud", "mcmc", "cv", ...) so a
    change in one does not shift the random numbers seen by another.
    """
    if seed is None:
        raise ValueError("a seed is required for stochastic operations")
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
