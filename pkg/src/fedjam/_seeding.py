"""Deterministic seed derivation (SplitMix64)."""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 output step for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer ``keys`` into ``seed``, returning a new u64 seed.

    ``derive_seed(s, a, b) == derive_seed(derive_seed(s, a), b)``.
    """
    out = int(seed) & _MASK
    for key in keys:
        out = splitmix64(out ^ splitmix64(int(key) & _MASK))
    return out


def rng_from(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
