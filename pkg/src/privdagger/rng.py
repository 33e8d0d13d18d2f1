"""Deterministic random-stream derivation.

Every stochastic component draws from its own counter-based stream derived
from a root seed and a path of labels, so collection order (or parallel
execution) cannot change results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream path parts must be int or str, got {type(part)!r}")


def substream(root_seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by (root_seed, *path).

    Uses Philox (counter-based) keyed through SeedSequence, so streams for
    distinct paths are independent and reproducible across runs.
    """
    entropy = [int(root_seed) & 0xFFFFFFFF] + [_encode(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
