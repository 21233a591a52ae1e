"""Counter-based random streams (Philox4x32-10).

A stream is keyed by ``(seed, stream_id)``; its ``counter`` indexes Philox
blocks.  Each block yields two 64-bit words.  Uniform draws use both words
of a block, a standard normal uses one whole block (two uniforms through
Box-Muller), so the counter advance for any draw depends only on its size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import kernels

_U64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return x ^ (x >> 31)


def _count(size) -> tuple[int, tuple[int, ...]]:
    shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    n = 1
    for s in shape:
        n *= int(s)
    return n, shape


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _U64
        self.stream_id = int(self.stream_id) & _U64

    def spawn(self, index: int) -> "RngStream":
        """Independent child stream, a pure function of (seed, stream_id, index)."""
        child = _splitmix64(_splitmix64(self.stream_id) ^ (int(index) & _U64))
        return RngStream(self.seed, child)

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def uniform(self, size=1) -> np.ndarray:
        n, shape = _count(size)
        out = kernels.philox_uniform(self.seed, self.stream_id, self.counter, n)
        self.counter += (n + 1) // 2
        return out.reshape(shape)

    def normal(self, size=1) -> np.ndarray:
        n, shape = _count(size)
        out = kernels.philox_normal(self.seed, self.stream_id, self.counter, n)
        self.counter += n
        return out.reshape(shape)

    def integers(self, high: int, size=1) -> np.ndarray:
        """Uniform integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.minimum((self.uniform(size) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def subset(self, ground: Sequence[int], size: int) -> tuple[int, ...]:
        """Uniform size-``size`` subset of ``ground`` (sorted), via partial Fisher-Yates."""
        items = list(ground)
        if len(items) < 2:
            raise ValueError("subset draws need a ground set of at least 2 elements")
        if not 0 <= size <= len(items):
            raise ValueError(f"subset size {size} exceeds ground set of {len(items)}")
        u = self.uniform(size) if size else np.empty(0)
        m = len(items)
        for i in range(size):
            j = i + min(int(u[i] * (m - i)), m - i - 1)
            items[i], items[j] = items[j], items[i]
        return tuple(sorted(items[:size]))


def draw(stream: RngStream, kind: str, *args, **kwargs):
    """Dispatch form: ``draw(s, "standard_normal", shape)``, ``draw(s, "subset", ground, k)``."""
    if kind == "standard_normal":
        return stream.normal(*args, **kwargs)
    if kind == "uniform01":
        return stream.uniform(*args, **kwargs)
    if kind == "subset":
        return stream.subset(*args, **kwargs)
    raise ValueError(f"unknown draw kind {kind!r}")
