"""One seed, independent random streams per subsystem."""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Generator for ``stream`` derived from ``seed``; stable across runs and platforms."""
    key = (zlib.crc32(stream.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
