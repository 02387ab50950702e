"""Seed derivation and a small portable RNG for the lattice kernel.

Per-realization seeds come from splitmix64 applied to (base_seed, index),
so ensembles are reproducible and can be extended without reshuffling
existing members.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2**-53, so draws lie in [0, 1) with full double mantissa resolution
_U53 = 1.1102230246251565e-16


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def mix_seed(base_seed: int, index: int) -> int:
    """Derive the 64-bit seed of realization `index` from `base_seed`."""
    if index < 0:
        raise ValueError("realization index must be nonnegative")
    z = (base_seed + (index + 1) * _GAMMA) & _MASK64
    return _mix64(z)


class SplitMix64:
    """Minimal counter-style generator; the numba lattice kernel advances
    the same state with identical arithmetic, so Python and kernel paths
    can share one stream."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * _U53


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
