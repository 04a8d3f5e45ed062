"""Named random streams derived from one top-level seed.

Every source of randomness in the pipeline (parameter init, data shuffling,
alignment-center draws, synthetic video noise, ...) pulls from its own named
stream so runs are reproducible and streams are independent of each other.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{name}:{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Generator for stream ``name`` (optionally sub-indexed) under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(name, index)]))
