"""Counter-based SplitMix64 streams.

Every random draw in the package comes from a :class:`RandomStream`. A stream
is a 64-bit key plus a counter; output ``i`` is the SplitMix64 finalizer
applied to ``key + (counter + i + 1) * GOLDEN``. Children are derived by
mixing a label into the key, so streams for different purposes (data
generation, splitting, init, sampling) never share state and a stream for
"episode 17" can be built without touching episodes 0..16.

Floats use the top 53 bits of each output. Gaussians use Box-Muller.
Permutations sort fresh 64-bit keys (stable argsort), which is a uniform
shuffle up to key collisions (probability ~n^2 / 2^65).
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def _label_hash(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        return _mix_int(int(label) ^ 0x5851F42D4C957F2D)
    h = _FNV_OFFSET
    for byte in str(label).encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


class RandomStream:
    """A splittable, seekable stream of 64-bit random values."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = key & MASK64
        self.counter = counter

    @classmethod
    def from_seed(cls, seed: int) -> RandomStream:
        return cls(_mix_int(int(seed) * GOLDEN + 0x2545F4914F6CDD1D))

    def child(self, *labels: int | str) -> RandomStream:
        """Independent stream keyed by ``labels``; does not advance ``self``."""
        key = self.key
        for label in labels:
            key = _mix_int(key ^ _label_hash(label))
        return RandomStream(key)

    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        return _mix_array(z)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal float64 values (Box-Muller, both branches used)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` in random order."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct items from {n}")
        return self.permutation(n)[:k]
