"""Deterministic seed fan-out.

Every stage derives its generator from the single global seed by hashing
`seed/stage/and/any/indices` with SHA-256, so stages and parallel workers
are reproducible independently of scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(global_seed: int, *tags) -> int:
    key = "/".join([str(global_seed), *(str(t) for t in tags)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(global_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, *tags))
