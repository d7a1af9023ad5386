"""Deterministic random streams built on the splitmix64 mixer.

Every stochastic choice in this package flows through a `Stream` keyed by
(seed, purpose, indices).  Streams are counter-based: output i is the
splitmix64 scramble of ``state + (i + 1) * GOLDEN``, so draws are
vectorizable and independent streams never share values.  No system
entropy, no global state.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_U64_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0**-53)


def _scramble(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function on uint64 values (vectorized).

    Wraparound on multiply/add is the intended mod-2**64 arithmetic.
    """
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a(data: bytes) -> np.uint64:
    h = int(_FNV_OFFSET)
    for b in data:
        h = ((h ^ b) * int(_FNV_PRIME)) & _U64_MASK
    return np.uint64(h)


def derive_state(seed: int, *key: int | str) -> np.uint64:
    """Fold (seed, key tokens) into a single 64-bit stream state.

    String tokens are FNV-1a hashed; integer tokens are taken mod 2**64.
    Folding applies the splitmix64 scramble after each token so that
    (0, "a") and ("a", 0) key distinct streams.
    """
    state = np.uint64(int(seed) & _U64_MASK)
    for token in key:
        if isinstance(token, str):
            t = _fnv1a(token.encode("utf-8"))
        else:
            t = np.uint64(int(token) & _U64_MASK)
        with np.errstate(over="ignore"):
            state = _scramble((state ^ t) + _GOLDEN)
    return state


class Stream:
    """A deterministic 64-bit random stream keyed by (seed, *key).

    Draw order matters: each call advances an internal counter, so the
    sequence of values depends only on the key and the call sequence.
    """

    def __init__(self, seed: int, *key: int | str):
        self._state = derive_state(seed, *key)
        self._count = 0

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 outputs."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _scramble(self._state + idx * _GOLDEN)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Uniform float64 in [0, 1) with 53-bit resolution."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Standard normal via Box-Muller on paired uniforms."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so the log is finite
        u1 = ((self.raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (self.raw(m) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, low: int, high: int, size: int | tuple[int, ...] = ()) -> np.ndarray | int:
        """Integers in [low, high), via 53-bit uniforms (bias < 2**-53)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(size if size != () else 1)
        vals = (np.floor(np.asarray(u, dtype=np.float64) * (high - low)).astype(np.int64) + low)
        vals = np.minimum(vals, high - 1)
        if size == ():
            return int(vals[0])
        return vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        """size indices drawn from range(n)."""
        if replace:
            return self.integers(0, n, size)
        if size > n:
            raise ValueError(f"cannot draw {size} from {n} without replacement")
        return self.permutation(n)[:size]
