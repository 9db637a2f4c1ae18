"""Deterministic named RNG sub-streams.

All randomness in a run flows from a single integer seed. Each consumer asks
for a named stream (``"data"``, ``"init"``, ``"shuffle:t3"``, ``"kmeans"``, ...)
so that adding a consumer never perturbs the draws seen by the others.
"""

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> list[int]:
    """Entropy words for (seed, name); stable across platforms and runs."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def named_rng(seed: int, name: str) -> np.random.Generator:
    """A fresh Generator for the sub-stream ``name`` of ``seed``."""
    return np.random.default_rng(stream_key(seed, name))
