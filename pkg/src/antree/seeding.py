"""Seed stream splitting.

Every random draw in a run comes from ``derive_seed(run_seed, *keys)`` where
``keys`` name the consumer, e.g. ``("grow", leaf, "split", "epoch", 3)``.
Strings are folded to integers with CRC-32 so the mapping is stable across
processes and Python versions (unlike ``hash``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(base: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=[int(base) & 0xFFFFFFFFFFFFFFFF, *map(_key_int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def rng_for(base: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))
