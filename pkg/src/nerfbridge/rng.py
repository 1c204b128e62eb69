"""Portable random streams: xoshiro256** seeded through splitmix64.

Everything random in nerfbridge (synthetic data, view choice, shuffling,
weight init) is drawn from these generators so results are reproducible
from the algorithm description alone.

Two flavours share the same arithmetic. :class:`Xoshiro256` is a scalar
stream in pure Python integers. :class:`XoshiroLanes` advances many
independent streams in lockstep with numpy ``uint64`` arrays; lane ``i`` of
``XoshiroLanes(seeds)`` produces exactly the sequence of
``Xoshiro256(seeds[i])``.

Floating-point conversions:

* uniform: ``(x >> 11) * 2**-53`` in [0, 1)
* normal: Box-Muller on two consecutive uniforms ``u1, u2`` giving
  ``r*cos(2 pi u2)`` then ``r*sin(2 pi u2)`` with ``r = sqrt(-2 ln(1 - u1))``
* bounded integer in [0, n): ``(x * n) >> 64``
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
_TWO_NEG_53 = 1.0 / (1 << 53)


def splitmix64(state):
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed, *keys):
    """Mix a base seed with string/int keys into a child u64 seed.

    Keys are hashed with SHA-256 so the derivation is stable across
    processes and platforms (unlike ``hash()``).
    """
    h = hashlib.sha256()
    h.update(int(seed & MASK64).to_bytes(8, "little"))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def _seed_state(seed):
    s = seed & MASK64
    out = []
    for _ in range(4):
        s, z = splitmix64(s)
        out.append(z)
    return out


class Xoshiro256:
    """Scalar xoshiro256** stream."""

    def __init__(self, seed):
        self.s = _seed_state(int(seed))

    def next_u64(self):
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self):
        return (self.next_u64() >> 11) * _TWO_NEG_53

    def below(self, n):
        """Integer in ``[0, n)``."""
        return (self.next_u64() * n) >> 64

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


class XoshiroLanes:
    """Independent xoshiro256** streams advanced together."""

    def __init__(self, seeds):
        states = [_seed_state(int(s)) for s in seeds]
        self.s = np.array(states, dtype=np.uint64).T.copy()  # (4, lanes)

    @property
    def lanes(self):
        return self.s.shape[1]

    @staticmethod
    def _rotl(x, k):
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = self._rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self.s[3] = self._rotl(s3, 45)
        return result

    def uniform(self, count):
        """``(lanes, count)`` float64 uniforms in [0, 1)."""
        out = np.empty((self.lanes, count), dtype=np.float64)
        for j in range(count):
            out[:, j] = (self.next_u64() >> np.uint64(11)).astype(np.float64)
        return out * _TWO_NEG_53

    def normal(self, count):
        """``(lanes, count)`` standard normals via Box-Muller."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0::2]))
        theta = 2.0 * np.pi * u[:, 1::2]
        z = np.empty((self.lanes, 2 * pairs), dtype=np.float64)
        z[:, 0::2] = r * np.cos(theta)
        z[:, 1::2] = r * np.sin(theta)
        return z[:, :count]


def scalar_normal(gen, count):
    """Reference Box-Muller on a scalar stream (matches one lane of ``normal``)."""
    import math

    out = []
    while len(out) < count:
        u1, u2 = gen.uniform(), gen.uniform()
        r = math.sqrt(-2.0 * math.log1p(-u1))
        out.append(r * math.cos(2.0 * math.pi * u2))
        out.append(r * math.sin(2.0 * math.pi * u2))
    return out[:count]
