"""Deterministic, splittable random streams.

All stochastic call paths take an explicit seed and derive independent streams
by hashing a (seed, *tags) tuple into a Philox key. Philox is counter-based,
so streams produce identical bit sequences on every platform and never overlap
for distinct keys.
"""

import hashlib

import numpy as np


def derive_key(seed: int, *tags) -> int:
    """Hash a seed plus string/int tags into a 128-bit Philox key."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the stream named by (seed, *tags)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *tags)))
