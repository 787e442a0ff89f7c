"""Deterministic seed streams.

Every source of randomness in the harness draws from a stream derived by
hashing a base seed together with string/int tags (e.g. round and client
id). Hashing removes cross-client ordering effects: client 3's stream at
round 7 is the same whether clients run sequentially or not.
"""

import hashlib

import numpy as np


def derive_seed(base: int, *tags) -> int:
    """Collapse ``(base, *tags)`` into a stable 64-bit seed via SHA-256."""
    material = ":".join([str(int(base))] + [str(t) for t in tags])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(base: int, *tags) -> np.random.Generator:
    """A fresh PCG64 generator for the stream named by ``(base, *tags)``."""
    return np.random.default_rng(derive_seed(base, *tags))
