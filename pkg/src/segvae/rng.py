"""Deterministic counter-based random numbers.

Every random draw in the package flows from a `Rng` stream identified by a
64-bit key and a position counter.  Values are produced by the SplitMix64
finalizer applied to ``key + GOLDEN * counter``, so the stream is a pure
function of (key, counter): state is two integers, serialization is trivial,
and replaying from a stored state continues the stream bit-for-bit.

Sub-streams are derived by stable hashing of (key, purpose string), never by
splitting off the counter, so the draw order of one consumer cannot perturb
another.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _splitmix(x: np.ndarray) -> np.ndarray:
    # SplitMix64 output function; uint64 arithmetic wraps mod 2^64 by design.
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream."""

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & _U64_MASK
        self.counter = int(counter) & _U64_MASK

    @classmethod
    def from_seed(cls, seed: int, purpose: str = "root") -> "Rng":
        """Root stream for a user-facing integer seed and a purpose label."""
        payload = b"segvae-rng:" + int(seed).to_bytes(8, "little", signed=False) + purpose.encode()
        key = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        return cls(key)

    def derive(self, purpose: str) -> "Rng":
        """Independent child stream; depends only on (key, purpose)."""
        payload = self.key.to_bytes(8, "little") + b"/" + purpose.encode()
        key = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        return Rng(key)

    @property
    def state(self) -> tuple[int, int]:
        return (self.key, self.counter)

    @classmethod
    def from_state(cls, state: tuple[int, int]) -> "Rng":
        return cls(state[0], state[1])

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 words, advancing the counter by n."""
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter = (self.counter + n) & _U64_MASK
        with np.errstate(over="ignore"):
            return _splitmix(np.uint64(self.key) + _GOLDEN * idx)

    def uniform(self, shape=()) -> np.ndarray:
        """U[0,1) doubles with 53 random mantissa bits."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape != () else float(u[0])

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller on (0,1] uniforms."""
        scalar = shape == ()
        n = 1 if scalar else int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        w = self.raw(2 * m)
        # shift into (0,1] so log() is finite
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        ang = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:n].astype(dtype)
        return float(z[0]) if scalar else z.reshape(shape)

    def integers(self, bound: int, n: int) -> np.ndarray:
        """n ints uniform on [0, bound); bias ~bound/2^53 is negligible here."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniform((n,)) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        u = self.uniform((n - 1,))
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            out[i], out[j] = out[j], out[i]
        return out

    def choice(self, n: int) -> int:
        return int(self.integers(n, 1)[0])
