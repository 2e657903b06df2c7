"""Seed splitting.

Every random stream is derived from the master seed by
``numpy.random.SeedSequence(master, spawn_key=keys)``, where ``keys`` is a
tuple of small non-negative integers naming the consumer (stage, client,
round, ...). Two streams with different keys are statistically independent
and any stream can be regenerated in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def seed_seq(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(seed_seq(seed, *keys))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for APIs that want a plain int."""
    return int(seed_seq(seed, *keys).generate_state(1, dtype=np.uint64)[0] >> 1)
