"""Named, splittable random streams.

Every stochastic choice draws from a Philox (counter-based) generator keyed by
the experiment seed plus a path of names, so adding a consumer never shifts the
numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *path: str | int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
