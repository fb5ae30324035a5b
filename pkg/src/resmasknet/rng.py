"""Portable seeded random numbers.

SplitMix64 is a counter-based member of the xorshift family: output ``i`` is a
pure function of ``(seed, i)``, so whole blocks can be generated with vectorised
uint64 arithmetic and streams are identical on every platform.
"""
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """Mix ``seed`` with an array of uint64 counters."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (counters.astype(np.uint64) + np.uint64(1)) * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Sequential stream over :func:`splitmix64` outputs."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return splitmix64(self.seed, idx)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        # 53 high bits -> [0, 1)
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return lo + (hi - lo) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws (Box-Muller)."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def fork(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``."""
        child = int(splitmix64(self.seed, np.array([key], dtype=np.uint64))[0])
        return Rng(child)
