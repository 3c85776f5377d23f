"""Deterministic RNG derivation.

Every stochastic component draws from a Generator derived from (seed, stream
names). Stream names are hashed with crc32 so derivation is stable across
processes and platforms.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def derive_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Return a Generator for the given seed and stream path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *stream: int | str) -> int:
    """Collapse a stream path to a plain integer seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in stream))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
