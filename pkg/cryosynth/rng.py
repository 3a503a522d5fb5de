"""Counter-based random streams derived from one root seed.

Each stage and scene draws from its own Philox stream keyed by
``(seed, *keys)`` so results never depend on execution order or on
how many worker threads are used.
"""

import hashlib

import numpy as np

SEED_MAX = 2**64 - 1


def _key_word(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream key must be non-negative: {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed, *keys):
    """Return an independent generator for ``(seed, *keys)``."""
    if not 0 <= int(seed) <= SEED_MAX:
        raise ValueError(f"seed out of range: {seed}")
    sequence = np.random.SeedSequence(
        int(seed), spawn_key=tuple(_key_word(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(sequence))
