"""Deterministic randomness: a counter-based SplitMix64 stream with
Box-Muller Gaussians.

Every stochastic choice in the package (noise draws, init, batch picks)
flows through `Prng` rather than numpy's global state, so a seed pins the
whole run bit-for-bit across platforms. SplitMix64's output is a pure
function of ``seed + i * gamma``, which lets us generate whole blocks of
the stream with vectorized uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer on a uint64 array; wrapping arithmetic intended.
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 generator. One u64 of state; each draw advances it by
    one gamma step, so streams are reproducible and splittable."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        with np.errstate(over="ignore"):
            ctr = self.state + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
            out = _mix(ctr)
            self.state = (self.state + _GAMMA * np.uint64(n)).astype(np.uint64)
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in (0, 1], using the top 53 bits."""
        return ((self.u64(n) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53

    def below(self, n: int) -> int:
        """One integer uniform in [0, n)."""
        if n <= 0:
            raise ShapeError(f"below() requires n >= 1, got {n}")
        return int(self.u64(1)[0] % np.uint64(n))

    def integers(self, n: int, count: int) -> np.ndarray:
        """count integers uniform in [0, n)."""
        if n <= 0:
            raise ShapeError(f"integers() requires n >= 1, got {n}")
        return (self.u64(count) % np.uint64(n)).astype(np.int64)

    def split(self) -> "Prng":
        """Derive an independent child stream."""
        return Prng(int(self.u64(1)[0]))

    def randn(self, shape, dtype=np.float32) -> np.ndarray:
        """I.i.d. standard normal entries via Box-Muller (both values of
        each pair are consumed, so the stream advances by 2*ceil(n/2))."""
        shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
        if any(s <= 0 for s in shape):
            raise ShapeError(f"randn shape must have positive extents, got {shape}")
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype)
