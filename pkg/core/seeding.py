"""
Seed Derivation

Every random draw in the pipeline comes from a generator derived from the
global seed plus a stable key, so results never depend on processing order
or on how many worker threads are running.
"""

import hashlib
from typing import Union

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(seed: int, *keys: Union[str, int, float]) -> int:
    """Hash a global seed and a key path into a 64-bit seed"""
    digest = hashlib.sha256()
    digest.update(str(int(seed) & SEED_MASK).encode("utf-8"))
    for key in keys:
        digest.update(b"\x1f")
        digest.update(str(key).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "little")


def derive_rng(seed: int, *keys: Union[str, int, float]) -> np.random.Generator:
    """Independent generator for (seed, keys...)"""
    return np.random.default_rng(derive_seed(seed, *keys))
