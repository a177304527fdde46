"""Deterministic, splittable random streams.

Every stochastic component in the repo draws from a `SeededRng`. Streams are
PCG64 generators keyed by a `numpy.random.SeedSequence`, so identical
(seed, split path, call sequence) yields identical values on every platform.
Splitting extends the spawn key instead of consuming draws, which keeps
sibling streams independent of each other's consumption order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        # crc32 is stable across platforms and python versions
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"split key must be int or str, got {type(key)!r}")


class SeededRng:
    """A seeded random stream that can be split into independent children."""

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in _spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, *keys) -> "SeededRng":
        """Child stream at `spawn_key + keys`; does not advance this stream."""
        new_key = self.spawn_key + tuple(_key_to_int(k) for k in keys)
        return SeededRng(self.seed, new_key)

    # -- draws ------------------------------------------------------------

    def normal(self, shape=None, scale=1.0, dtype=np.float32):
        out = self._gen.standard_normal(size=shape) * scale
        if shape is None:
            return float(out)
        return np.asarray(out, dtype=dtype)

    def uniform(self, low: float, high: float, shape=None, dtype=np.float32):
        out = self._gen.random(size=shape, dtype=np.float64) * (high - low) + low
        if shape is None:
            return float(out)
        return np.asarray(out, dtype=dtype)

    def random(self, shape=None, dtype=np.float32):
        if shape is None:
            return float(self._gen.random())
        return self._gen.random(size=shape, dtype=dtype)

    def random_f32_grid(self, shape):
        """Uniform float32 multiples of 2**-24 in [0, 1); exact under x -> 1-x."""
        return self._gen.random(size=shape, dtype=np.float32)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, spawn_key={self.spawn_key})"
