"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; toggling one consumer never shifts another."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
