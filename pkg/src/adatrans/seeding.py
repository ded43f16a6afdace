"""Deterministic seed derivation.

Every random stream in the package is addressed by a master seed plus a tuple
of keys.  Keys are integers or strings; strings are hashed with blake2b so the
mapping is stable across interpreter runs (unlike ``hash``).  Streams keyed by
population position mean that appending a source population never perturbs
the draws of the populations before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(
        entropy=int(master), spawn_key=tuple(_key_to_int(k) for k in keys)
    )


def rng_for(master: int, *keys) -> np.random.Generator:
    """Return a generator for the stream ``(master, *keys)``."""
    return np.random.default_rng(seed_sequence(master, *keys))


def derive_seed(master: int, *keys) -> int:
    """Return a 63-bit integer seed for the stream ``(master, *keys)``."""
    state = seed_sequence(master, *keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def content_key(row: np.ndarray) -> int:
    """Stable integer key for the bytes of a float row."""
    arr = np.ascontiguousarray(np.asarray(row, dtype=np.float64))
    digest = hashlib.blake2b(arr.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
