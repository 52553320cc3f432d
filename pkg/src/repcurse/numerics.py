"""Floating-point kernels and the SplitMix64 random stream used across the package.

All arrays are float64. ``RngStream`` is a bit-exact SplitMix64 generator:

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9       (mod 2**64)
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB       (mod 2**64)
    output z ^ (z >> 31)

Streams are derived from a ``(seed, label)`` pair.  The label is hashed with
64-bit FNV-1a over its UTF-8 bytes (offset basis 0xCBF29CE484222325, prime
0x100000001B3) and the initial state is ``mix64(seed ^ fnv1a64(label))`` where
``mix64(x)`` is the output of one SplitMix64 step taken from state ``x``.

Derived quantities:

* ``random()``      -> ``(next_u64() >> 11) * 2**-53`` in [0, 1)
* ``randbelow(n)``  -> rejection sampling on ``next_u64()`` against the largest
  multiple of ``n`` below 2**64, then ``% n`` (unbiased)
* ``normal()``      -> Box-Muller on two ``random()`` draws, cosine branch only
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

PROB_ATOL = 1e-9


class NumericsError(ValueError):
    pass


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def mix64(x: int) -> int:
    """One SplitMix64 output taken from state ``x``."""
    return _finalize((x + GOLDEN_GAMMA) & MASK64)


def fnv1a64(label: str) -> int:
    h = FNV_OFFSET
    for b in label.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


class RngStream:
    """Single-owner SplitMix64 stream. Never share one between concurrent consumers."""

    __slots__ = ("state",)

    def __init__(self, state: int):
        self.state = state & MASK64

    def clone(self) -> "RngStream":
        return RngStream(self.state)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _finalize(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive outputs, identical to ``n`` calls of ``next_u64``."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def random_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise NumericsError(f"randbelow needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def choice(self, items: Sequence):
        return items[self.randbelow(len(items))]

    def sample(self, items: Sequence, k: int) -> list:
        """``k`` distinct items, via a partial Fisher-Yates shuffle."""
        pool = list(items)
        if k > len(pool):
            raise NumericsError(f"cannot sample {k} from {len(pool)} items")
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        u = self.random_array(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (std * z).reshape(shape)

    def categorical(self, p: np.ndarray) -> int:
        """Inverse-CDF draw from a probability vector."""
        u = self.random()
        cdf = np.cumsum(p)
        idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
        return min(idx, len(p) - 1)


def derive_stream(seed: int, label: str) -> RngStream:
    return RngStream(mix64((seed & MASK64) ^ fnv1a64(label)))


def _check_logits(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise NumericsError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericsError("softmax input contains non-finite entries")
    return x


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    x = _check_logits(logits)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = _check_logits(logits)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def check_prob_vector(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise NumericsError("probability vector must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NumericsError("probability vector has negative or non-finite entries")
    total = p.sum()
    if abs(total - 1.0) > PROB_ATOL:
        raise NumericsError(f"probability vector sums to {total!r}, not 1")
    return p


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = check_prob_vector(p)
    nz = p[p > 0]
    h = float(-(nz * np.log(nz)).sum())
    # rounding (and the 1e-9 sum tolerance) can push h just outside [0, ln|V|]
    return min(max(h, 0.0), math.log(p.size))
