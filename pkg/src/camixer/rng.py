"""Seedable counter-based random streams (Philox)."""

from __future__ import annotations

import numpy as np

_TINY = 2.0**-53


class Rng:
    """Replayable random stream.

    Identical seeds give bit-identical draws. ``uniform_open`` never returns
    0 or 1, so Gumbel noise ``-log(-log(u))`` is always finite.
    """

    def __init__(self, seed: int = 0, *, _bitgen=None):
        self.seed = int(seed)
        self._gen = np.random.Generator(_bitgen or np.random.Philox(self.seed))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(self.seed, _bitgen=np.random.Philox(ss))

    def uniform_open(self, shape) -> np.ndarray:
        u = self._gen.random(shape)
        return np.where(u == 0.0, _TINY, u)

    def gumbel(self, shape) -> np.ndarray:
        return -np.log(-np.log(self.uniform_open(shape)))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws resampled until they fall within ``bound`` std devs."""
        z = self._gen.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return z * std

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
