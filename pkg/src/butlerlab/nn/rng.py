"""Counter-based deterministic random streams.

Philox is a counter-based generator whose output depends only on the key and
counter, so the same seed reproduces the same draws on every platform. Named
sub-streams hash the name into the key so components never share draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import default_dtype


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class Rng:
    def __init__(self, seed: int, stream: str = ""):
        self.seed = int(seed)
        self.stream = stream
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, _stream_key(stream)])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}" if self.stream else name)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype or default_dtype())

    def normal(self, shape, std: float = 1.0, dtype=None) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype or default_dtype())

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
