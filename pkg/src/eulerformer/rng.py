"""Named random streams derived from a single seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the numbers another one sees.
"""
import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key, *map(int, extra)])
