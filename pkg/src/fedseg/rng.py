"""SplitMix64 pseudo-random generator.

Every random draw in the package (weight init, partition shuffles, batch
order, synthetic data) comes from this generator so that a stream can be
reproduced bit-for-bit from its seed in any language.

Algorithm (all arithmetic modulo 2**64)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Derived quantities:

* ``random()``   -> ``(next_u64() >> 11) * 2**-53``, a float in [0, 1)
* ``below(n)``   -> ``(next_u64() * n) >> 64``, an int in [0, n)
* ``shuffle(xs)``-> Fisher-Yates, ``for i = n-1 .. 1: swap(xs[i], xs[below(i+1)])``
* ``derive_seed(seed, *keys)`` -> for each key: ``seed = mix64(seed ^ mix64(key + GAMMA))``

Test vectors, seed 0: 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.
"""

from __future__ import annotations

from typing import MutableSequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

T = TypeVar("T")


def mix64(z: int) -> int:
    """Finalizer of SplitMix64 on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed; order of keys matters."""
    s = seed & MASK64
    for k in keys:
        s = mix64(s ^ mix64((k + GAMMA) & MASK64))
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def shuffle(self, xs: MutableSequence[T]) -> None:
        for i in range(len(xs) - 1, 0, -1):
            j = self.below(i + 1)
            xs[i], xs[j] = xs[j], xs[i]

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array; same stream as ``n`` calls to next_u64."""
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        out = _mix64_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random_array(self, n: int) -> np.ndarray:
        """Next ``n`` floats in [0, 1) as float64."""
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
