"""Named random streams derived from a single integer seed.

Each consumer (``"init"``, ``"shuffle"``, ``"augment"``, ``"rrelu"``, ...)
gets its own generator, so adding a consumer never perturbs the others.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
