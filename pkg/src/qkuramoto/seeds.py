"""Deterministic seed derivation and counter-based generators.

Every random stream is a Philox generator keyed by a 64-bit value derived
from ``(base_seed, replica_index, stream_tag)`` with a splitmix64 mixer, so
replicas can run in any order or process without sharing state.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

STREAM_TAGS = {"disorder": 1, "init": 2, "noise": 3, "ou": 4, "ou_disorder": 5}


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, replica: int = 0, tag: str | int = 0) -> int:
    t = STREAM_TAGS[tag] if isinstance(tag, str) else int(tag)
    z = splitmix64(int(base_seed) & MASK64)
    z = splitmix64(z ^ (int(replica) & MASK64))
    return splitmix64(z ^ t)


def generator(seed: int, tag: str | int) -> np.random.Generator:
    """Philox generator for one stream of one seed."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, 0, tag)))


def replica_seeds(base_disorder: int, base_noise: int, n_disorder: int, n_noise: int) -> list[tuple[int, int]]:
    """(disorder_seed, noise_seed) for replicas laid out disorder-major."""
    out = []
    for d in range(n_disorder):
        ds = derive_seed(base_disorder, d, "disorder")
        for n in range(n_noise):
            out.append((ds, derive_seed(base_noise, d * n_noise + n, "noise")))
    return out
