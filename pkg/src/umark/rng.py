"""Seeded PRNG: xoshiro256** with splitmix64 subseeding.

Every random draw in the package goes through :class:`Xoshiro256` so that a
single master seed reproduces a whole experiment. Streams for different
purposes are separated by XOR-ing the master seed with a fixed purpose tag
and passing the result (plus any indices) through splitmix64.
"""

from __future__ import annotations

import math

MASK64 = 0xFFFFFFFFFFFFFFFF

# Purpose tags. Changing any of these changes every derived stream.
TAG_SAMPLE = 0x53414D504C450001  # per-sample rendering
TAG_FLAGS = 0x464C414753000002  # trigger flag selection per split
TAG_ARTIFACT = 0x4152544946000003  # artifact placement
TAG_INIT = 0x494E495450000004  # parameter init
TAG_SHUFFLE = 0x5348554646000005  # minibatch order
TAG_PERTURB = 0x5045525455000006  # random cell subsets
TAG_TRIGGER = 0x5452494747000007  # noise trigger values
TAG_FINETUNE = 0x46494E4554000008  # fine-tune subset
TAG_GRID = 0x4752494447000009  # random watermark grid
TAG_PROBE = 0x50524F4245000010  # verification probes
TAG_AUGMENT = 0x4155474D45000011  # cell-masking augmentation


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(master: int, tag: int, *indices: int) -> int:
    """Subseed for ``(master, tag, indices...)``."""
    _, s = splitmix64((master ^ tag) & MASK64)
    for i in indices:
        _, s = splitmix64((s ^ (i & MASK64)) & MASK64)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator seeded from a 64-bit integer via splitmix64."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int):
        x = seed & MASK64
        x, self.s0 = splitmix64(x)
        x, self.s1 = splitmix64(x)
        x, self.s2 = splitmix64(x)
        x, self.s3 = splitmix64(x)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def below(self, n: int) -> int:
        """Integer in [0, n) by multiply-shift (bias < n / 2**64)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def integers(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.below(hi - lo + 1)

    def random_array(self, n: int) -> list[float]:
        return [self.random() for _ in range(n)]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def rng_for(master: int, tag: int, *indices: int) -> Xoshiro256:
    return Xoshiro256(derive_seed(master, tag, *indices))


def uniform_field(rng: Xoshiro256, shape: tuple[int, ...], lo: float = 0.0, hi: float = 1.0):
    import numpy as np

    n = math.prod(shape)
    return np.array([rng.uniform(lo, hi) for _ in range(n)], dtype=np.float64).reshape(shape)
