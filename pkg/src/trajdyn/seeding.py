"""Deterministic sub-seed derivation.

Every stochastic component draws from ``derive_seed(master, *path)``: the
path elements (strings or ints) are hashed with CRC-32 into a numpy
``SeedSequence`` spawn key, so e.g. ``derive_seed(7, "data", "train")`` is a
stable 63-bit integer independent of call order, platform and Python hash
randomization.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(master: int, *path) -> int:
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(p) for p in path))
    return int(seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1 << 31, 1], dtype=np.uint64)) & ((1 << 63) - 1)


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))
