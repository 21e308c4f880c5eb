"""Named, splittable random streams.

A stream is identified by a root seed and a path of names, e.g.
``Stream(42).child("noise").child("17")``. The path is hashed into a
128-bit key for numpy's counter-based Philox generator, so a stream's
output depends only on its identity, never on what other streams drew
or in which order they were created. Gaussian variates are produced
with the Box-Muller transform from the stream's uniform doubles.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np


def _key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for name in path:
        h.update(b"\x1f")
        h.update(name.encode())
    return int.from_bytes(h.digest(), "little")


class Stream:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f"Stream({self.seed}, {'/'.join(self.path) or '<root>'})"

    def child(self, name: str | int) -> "Stream":
        return Stream(self.seed, self.path + (str(name),))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.path)))
        return self._gen

    def uniform(self, size=None) -> np.ndarray:
        """Uniform doubles in [0, 1)."""
        return self.generator.random(size)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """i.i.d. N(0, scale**2) variates via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self.generator.random(pairs)  # (0, 1], keeps log finite
        u2 = self.generator.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        out = z[:count].reshape(shape)
        if scale != 1.0:
            out *= scale
        return out

    def integers(self, high: int, size=None) -> np.ndarray:
        return self.generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)
