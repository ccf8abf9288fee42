"""Counter-based seed derivation.

Every random stream in a run (data, client sampling, local shuffles, k-means)
is keyed by the master seed plus a tuple of labels, so streams never alias
and adding a stream does not perturb the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def seed_sequence(master: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=tuple(_key(k) for k in keys))


def derive_seed(master: int, *keys) -> int:
    return int(seed_sequence(master, *keys).generate_state(1, np.uint64)[0])


def derive_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, *keys))
