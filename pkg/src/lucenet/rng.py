"""Deterministic named RNG sub-streams.

Every source of randomness in the pipeline is derived from one master seed
plus a tuple of stream names, so that independent consumers (shuffling,
dropout, augmentation, init) never share or race a generator.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: str) -> int:
    """Map (seed, names...) to a stable 63-bit integer seed."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for name in names:
        h.update(b"\x00")
        h.update(name.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1


def substream(seed: int, *names: str) -> np.random.Generator:
    """A fresh Generator for the named sub-stream of ``seed``."""
    return np.random.default_rng(derive_seed(seed, *names))
