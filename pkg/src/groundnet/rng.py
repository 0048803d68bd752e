"""Deterministic 64-bit PRNG used everywhere randomness is needed.

The generator is a splitmix-style counter mixer: the k-th draw depends only
on (seed, k), so streams are reproducible across platforms and safe to
vectorize. Update constants:

    state_k = seed + (k+1) * 0x9E3779B97F4A7C15            (mod 2^64)
    z = state_k
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E4B9               (mod 2^64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB               (mod 2^64)
    out_k = z ^ (z >> 31)
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E4B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_U53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(master: int, label: str) -> int:
    """Stable sub-seed for a named stream (FNV-1a of the label, then mixed)."""
    with np.errstate(over="ignore"):
        h = np.uint64(0xCBF29CE484222325)
        for byte in label.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * np.uint64(0x100000001B3)
        return int(_mix(np.uint64(master & 0xFFFFFFFFFFFFFFFF) + h * _GAMMA))


class SplitMix64:
    """Counter-based PRNG; every method consumes draws from one stream."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GAMMA)

    def uniform(self, n: int = 1) -> np.ndarray:
        """n doubles uniform in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def uniform_in(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def uniform1(self) -> float:
        return float(self.uniform(1)[0])

    def randint(self, lo: int, hi: int, n: int = 1) -> np.ndarray:
        """n ints uniform in [lo, hi). Uses the float path; fine for small ranges."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + np.floor(self.uniform(n) * (hi - lo)).astype(np.int64)

    def randint1(self, lo: int, hi: int) -> int:
        return int(self.randint(lo, hi)[0])

    def normal(self, size: int | tuple[int, ...] = 1, sigma: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller; `size` is a count or a full shape."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = 1
        for d in shape:
            n *= d
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (out * sigma).reshape(shape)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates; returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.randint(0, i + 1)[0])
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n_items: int, k: int) -> np.ndarray:
        """k distinct indices from range(n_items), order randomized."""
        if k > n_items:
            raise ValueError(f"cannot choose {k} from {n_items}")
        return np.array(self.shuffle(list(range(n_items)))[:k], dtype=np.int64)
