from __future__ import annotations

import hashlib

import numpy as np


def sub_seed(master: int, label: str) -> int:
    """Derive a stable 63-bit seed for a named stage from a master seed.

    Adding or removing stages never changes the seed any other label receives.
    """
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    # keyed on (seed, index) so replicate streams do not depend on execution order
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
