"""Seeded random number generation.

One fixed algorithm: PCG64 behind numpy's Generator, seeded through
SeedSequence. numpy guarantees identical streams for a given seed across
platforms and releases, so a run is fully reproducible from the integer seed
recorded in its manifest. Child streams (per epoch, per role) are derived via
SeedSequence spawn keys and never overlap the parent.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Rng"]


class Rng:
    """PCG64 stream with explicit state and keyed child derivation."""

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        ss = np.random.SeedSequence(self.seed) if _ss is None else _ss
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        """Independent stream addressed by (seed, *key). Same key, same stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        return Rng(self.seed, _ss=ss)

    def uniform(self, size=None):
        """Draws in [0, 1)."""
        return self._gen.random(size)

    def normal(self, size=None):
        """Standard normal draws."""
        return self._gen.standard_normal(size)

    def shuffle(self, arr) -> None:
        """In-place Fisher-Yates shuffle along the first axis."""
        self._gen.shuffle(arr)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        """Index/element draw; rejects empty choice sets."""
        n = a if isinstance(a, (int, np.integer)) else len(a)
        if n == 0:
            raise ValueError("choice: empty choice set")
        return self._gen.choice(a, size=size, replace=replace)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)
