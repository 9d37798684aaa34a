"""Deterministic seed derivation.

Every random stream in the pipeline is derived from a single 64-bit run
seed.  Sub-seeds are produced by folding labels/indices into a splitmix64
chain, which gives independent-looking streams for distinct inputs while
staying reproducible across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *parts: int | str) -> int:
    """Mix ``parts`` (ints or short labels) into ``master``, returning a new 64-bit seed."""
    s = master & _MASK64
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                s = _splitmix64(s ^ b)
        else:
            s = _splitmix64(s ^ (int(part) & _MASK64))
    return _splitmix64(s)


def generator(seed: int, *parts: int | str) -> np.random.Generator:
    """PCG64 generator for the stream identified by ``seed`` and ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *parts) if parts else seed & _MASK64))
