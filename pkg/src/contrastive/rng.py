"""Seeded random streams.

All randomness flows from explicit unsigned 64-bit seeds. Generators use
numpy's Philox (counter-based) bit generator, so a given seed yields the same
stream on every platform. Child seeds are derived with a SplitMix64 finaliser,
which is pure integer arithmetic and therefore stable across runs.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def sub_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from ``seed`` and a path of integer keys."""
    z = check_seed(seed)
    for k in keys:
        z = _splitmix64(z ^ _splitmix64(int(k) & MASK64))
    return z


def sub_seeds(seed: int, count: int, *keys: int) -> np.ndarray:
    """``count`` consecutive child seeds (counter keys 0..count-1)."""
    base = sub_seed(seed, *keys)
    return np.array([sub_seed(base, i) for i in range(count)], dtype=np.uint64)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(sub_seed(seed, *keys) if keys else check_seed(seed)))
