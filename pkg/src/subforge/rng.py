"""SplitMix64 generator and the derived sampling helpers."""

import numpy as np

from . import kernels

MASK64 = 0xFFFFFFFFFFFFFFFF


class SplitMix64:
    """Sequential SplitMix64 stream (Steele, Lea & Flood constants)."""

    def __init__(self, seed: int):
        if seed < 0 or seed > MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.state = seed

    def next_u64(self) -> int:
        out, self.state = kernels.splitmix64_stream(self.state, 1)
        return int(out[0])

    def fill(self, n: int) -> np.ndarray:
        out, self.state = kernels.splitmix64_stream(self.state, n)
        return out

    def bounded(self, n: int) -> int:
        # plain modulo reduction; the bias is below 2**-50 for n < 2**14
        return self.next_u64() % n

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [-1, 1) built from the top 24 bits of each output."""
        top = (self.fill(n) >> np.uint64(40)).astype(np.float64)
        return top * (2.0 / (1 << 24)) - 1.0


def sample_indices(n: int, count: int, seed: int) -> list[int]:
    """First ``count`` slots of a Fisher-Yates shuffle of ``range(n)``."""
    if seed < 0 or seed > MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return kernels.fisher_yates_prefix(n, count, seed)
