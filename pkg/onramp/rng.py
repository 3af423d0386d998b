"""Seed derivation so parallel work stays reproducible."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, key: str | int) -> int:
    """Derive a stable 63-bit child seed from ``(master_seed, key)``."""
    digest = hashlib.blake2b(f"{int(master_seed)}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
