"""Counter-based pseudo-random generator with a fully specified algorithm.

The i-th raw word of a stream with 64-bit key ``k`` is

    word(k, i) = mix(k + (i + 1) * GOLDEN)   (mod 2**64)

where ``mix`` is the SplitMix64 finalizer (xor-shift / multiply rounds) and
GOLDEN = 0x9E3779B97F4A7C15. Because each word depends only on (key, index),
any slice of the stream can be generated independently and the output is
identical on every platform. Uniform doubles take the top 53 bits; normals
use the Box-Muller transform on uniform pairs.

Child streams (per subject, per purpose) are derived by hashing the parent
key with a tag: child(k, tag) = mix(mix(k) ^ mix(tag * GOLDEN + 1)).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _mix_scalar(z: int) -> int:
    return int(_mix(np.array([z], dtype=np.uint64))[0])


class CounterRng:
    """Deterministic stream of uniforms/normals addressed by (key, counter)."""

    def __init__(self, seed: int, key: int | None = None):
        self._key = _U64(key if key is not None else _mix_scalar(seed & 0xFFFFFFFFFFFFFFFF))
        self._counter = 0

    def child(self, tag: int) -> "CounterRng":
        """Independent stream derived from this one; same tag, same stream."""
        k = _mix_scalar(int(self._key)) ^ _mix_scalar((tag * int(_GOLDEN) + 1) & 0xFFFFFFFFFFFFFFFF)
        return CounterRng(0, key=_mix_scalar(k & 0xFFFFFFFFFFFFFFFF))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix(self._key + idx * _GOLDEN)

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1), from the top 53 bits of each word."""
        n = int(np.prod(shape)) if shape else 1
        vals = (self._words(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return vals.reshape(shape) if shape else vals[0]

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller; u1 is shifted off zero."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._words(2 * pairs)
        u1 = ((w[:pairs] >> _U64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (w[pairs:] >> _U64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] * std
        return vals.reshape(shape) if shape else vals[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by scaling uniforms; fine for shuffles."""
        u = self.uniform(shape if shape else (1,))
        vals = (low + np.floor(u * (high - low))).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle driven by this stream; returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def bernoulli_mask(self, shape, keep_prob: float) -> np.ndarray:
        """Inverted-dropout mask: entries are 1/keep_prob with prob keep_prob."""
        u = self.uniform(shape)
        return (u < keep_prob).astype(np.float64) / keep_prob
