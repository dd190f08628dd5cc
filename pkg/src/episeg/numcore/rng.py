"""Seeded random stream with counted draws.

Wraps numpy's PCG64 generator, whose output is specified bit-for-bit and
therefore identical across platforms.  Beta(g, g) is built from two Gamma
draws; Gamma uses Marsaglia-Tsang rejection, with the ``U**(1/a)`` boost for
shape below one, evaluated in log space so tiny shapes such as 0.1 do not
underflow to 0/0.
"""
import math

import numpy as np


class Rng:
    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.calls = 0

    def spawn(self, index):
        """Independent child stream keyed by ``seed xor index``."""
        return Rng(self.seed ^ int(index))

    def normal(self, size=None):
        self.calls += 1
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.calls += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.calls += 1
        return self._gen.integers(low, high, size)

    def choice(self, n, size, replace=True):
        self.calls += 1
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        self.calls += 1
        return self._gen.permutation(n)

    def _log_gamma(self, shape):
        boost = 0.0
        if shape < 1.0:
            u = self.uniform()
            while u == 0.0:
                u = self.uniform()
            boost = math.log(u) / shape
            shape += 1.0
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform()
            if u < 1.0 - 0.0331 * x ** 4 or (u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v))):
                return math.log(d * v) + boost

    def gamma(self, shape):
        if shape <= 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        return math.exp(self._log_gamma(shape))

    def beta(self, a, b=None):
        """Beta(a, b) sample; ``b`` defaults to ``a``."""
        b = a if b is None else b
        if a <= 0 or b <= 0:
            raise ValueError(f"beta parameters must be positive, got ({a}, {b})")
        lx = self._log_gamma(a)
        ly = self._log_gamma(b)
        # x / (x + y) == 1 / (1 + exp(ly - lx))
        t = ly - lx
        if t > 0:
            e = math.exp(-t)
            return e / (1.0 + e)
        return 1.0 / (1.0 + math.exp(t))


def sample_normal(rng, size=None):
    return rng.normal(size)


def sample_beta(rng, gamma):
    return rng.beta(gamma)
