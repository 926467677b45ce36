"""Portable counter-based PRNG (SplitMix64 finalizer over a 64-bit counter).

Draw ``k`` of a stream with seed ``s`` is ``mix(s + (k + 1) * 0x9E3779B97F4A7C15)``
with all arithmetic modulo 2**64, where ``mix`` is the SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms in [0, 1) use the top 53 bits: ``(z >> 11) * 2**-53``.
Normals use Box-Muller on consecutive uniform pairs (u1, u2) with
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; only the cosine branch is used.
Permutations argsort (stably) one raw 64-bit draw per element.

Any language with wrapping 64-bit integers reproduces these streams exactly.
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def splitmix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


class CounterRNG:
    """Stateless generator plus a position; ``(seed, counter)`` is the full state."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def raw(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * GOLDEN
        return splitmix64(z)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return u.reshape(shape)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.uniform((n, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return (r * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable")

    def row_permutations(self, rows: int, n: int) -> np.ndarray:
        keys = self.raw(rows * n).reshape(rows, n)
        return np.argsort(keys, axis=1, kind="stable")

    def state(self):
        return self.seed, self.counter
