"""
Deterministic random streams

Every random draw in the package goes through Rng, a thin wrapper over
numpy's Philox bit generator (Philox4x64 with 10 rounds, the counter-based
generator published with the Random123 library). The 128-bit Philox key
is laid out as:

    key word 0 = seed (low 64 bits)
    key word 1 = stream id

and the counter starts at zero, so the first four raw 64-bit outputs are
the Philox4x64-10 block for counter (1, 0, 0, 0). Identical (seed, stream)
pairs give identical streams on every platform.

Fixed stream ids keep the consumers independent of one another:

    STREAM_SPLIT    uniform train/test split shuffle
    STREAM_INIT     parameter initialization
    STREAM_SHUFFLE  mini-batch order (one derived stream per epoch)
    STREAM_CHECKS   randomized self-checks

Example:
    rng = Rng(seed=0, stream=STREAM_INIT)
    weights = rng.uniform((3, 3), -0.1, 0.1)
"""

from typing import Sequence, Tuple, Union

import numpy as np

MASK64 = (1 << 64) - 1

STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_CHECKS = 4

Shape = Union[int, Sequence[int], Tuple[int, ...]]


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError(f"seed and stream must be non-negative, got {seed}, {stream}")
        self.seed = seed & MASK64
        self.stream = stream & MASK64
        self.bit_generator = np.random.Philox(key=self.seed | (self.stream << 64))
        self.generator = np.random.Generator(self.bit_generator)

    def derive(self, index: int) -> 'Rng':
        """Independent sub-stream, e.g. one per epoch"""
        return Rng(self.seed, (self.stream + ((index + 1) << 32)) & MASK64)

    def uniform(self, shape: Shape, lo: float, hi: float, dtype=np.float64) -> np.ndarray:
        return self.generator.uniform(lo, hi, size=shape).astype(dtype, copy=False)

    def normal(self, shape: Shape, mean: float, std: float, dtype=np.float64) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        return self.generator.normal(mean, std, size=shape).astype(dtype, copy=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, lo: int, hi: int, size=None):
        return self.generator.integers(lo, hi, size=size)

    def raw(self, count: int) -> np.ndarray:
        """Raw 64-bit Philox outputs, for checking against test vectors"""
        return self.bit_generator.random_raw(count)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"
