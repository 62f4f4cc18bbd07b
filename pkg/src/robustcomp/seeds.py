"""Deterministic seed derivation.

Independent RNG streams are derived from a master seed with a
splitmix64-style mix: each tag (string or integer) is folded into the
state and scrambled, so (master, "train"), (master, "attack", 3) etc.
yield uncorrelated 64-bit seeds. The derivation is pure arithmetic and
stable across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *tags) -> int:
    """64-bit seed derived from a master seed and a tag path."""
    state = _mix(master & _MASK)
    for tag in tags:
        if isinstance(tag, str):
            for b in tag.encode():
                state = _mix(state ^ b)
        else:
            state = _mix(state ^ (int(tag) & _MASK))
    return state


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
