"""Labeled seed derivation.

All randomness in the package flows from one master seed. Stages derive their
own seed by hashing the master seed with a label path, so no stage depends on
how many draws another stage made.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(master: int, *labels: object) -> int:
    """Return a 64-bit seed for ``labels`` under ``master``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(master & MASK64).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_rng(master: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
