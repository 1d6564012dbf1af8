"""Portable seeded random numbers.

SplitMix64 produces the raw 64-bit stream: draw ``k`` (1-based) is
``mix(seed + k * 0x9E3779B97F4A7C15)`` with the usual xor-shift-multiply
finaliser.  Uniforms take the top 53 bits.  Standard normals come from the
Box-Muller transform applied to consecutive pairs ``(u1, u2)`` with
``u1 in (0, 1]`` and ``u2 in [0, 1)``; a pair yields ``r*cos`` then ``r*sin``.
An odd request discards the trailing sine value.

The recipe is small enough to port to any language; only statistical
agreement across ports is promised (libm ``log``/``cos`` may differ in the
last bit).
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64 stream with vectorised draws."""

    def __init__(self, seed):
        self.seed = np.uint64(int(seed) & _MASK)
        self.counter = 0

    def next_u64(self, count):
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            return _mix(self.seed + idx * _GAMMA)

    def uniform(self, count):
        """Uniform floats in [0, 1)."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) / 2.0**53

    def normal(self, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        raw = (self.next_u64(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (raw[0::2] + 1.0) / 2.0**53
        u2 = raw[1::2] / 2.0**53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:count].reshape(shape)

    def permutation(self, n):
        """Random permutation of range(n): stable argsort of n uniforms."""
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, tag):
        """Independent child stream keyed by an integer tag."""
        child = int(_mix(np.uint64((int(self.seed) ^ (int(tag) * 0xD1B54A32D192ED03)) & _MASK)))
        return SplitMix64(child)
