"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which keys a
Philox-4x64 counter-based generator (Salmon et al., 2011; numpy's
``np.random.Philox``) with the first 128 bits of
``SHA-256(f"{seed}/{path}")``. A parameter's initial value therefore depends
only on the global seed and its own path, never on how many other parameters
were drawn before it, and is identical on every platform numpy supports.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{path}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, path: str) -> np.random.Generator:
    """Independent generator for ``(seed, path)``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, path)))
