"""Deterministic derivation of independent random streams.

Every source of randomness in an experiment is a stream keyed by the
experiment seed plus a path of purpose tags, e.g. ``stream(seed, "select", t)``
or ``stream(seed, "train", t, client_id)``. Streams with different paths are
statistically independent and reproducible across runs.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path ints must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for (seed, *path); same arguments always give the same stream."""
    key = tuple(_key_part(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
