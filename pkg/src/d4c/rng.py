"""Counter-based, splittable random streams.

All randomness flows from Philox generators derived from a root seed and a
path of string keys, so a stream depends only on (seed, keys) and never on
how many draws other streams made.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_ints(keys) -> tuple[int, ...]:
    out = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            out.append(int(k) & 0xFFFFFFFF)
        else:
            h = hashlib.sha256(str(k).encode()).digest()
            out.append(int.from_bytes(h[:4], "little"))
    return tuple(out)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the stream ``seed/keys...``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key_ints(keys))
    return np.random.Generator(np.random.Philox(ss))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Deterministically derive ``n`` child generators from ``rng``."""
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [np.random.Generator(np.random.Philox(int(s))) for s in seeds]
