"""Pure-Python/numpy fallback for the compiled kernels in ``_ckernels.pyx``."""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_stream(state, n):
    # The k-th state is just state + k*GAMMA, so the whole stream vectorizes.
    state &= MASK64
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * np.uint64(GAMMA)
        out = _mix(z)
    return out, (state + n * GAMMA) & MASK64


def _next(state):
    state = (state + GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fisher_yates_prefix(n, count, seed):
    state = seed & MASK64
    idx = list(range(n))
    for i in range(min(count, n)):
        state, z = _next(state)
        j = i + z % (n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return idx[: min(count, n)]


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def prune_lowest(scores, k):
    scores = np.asarray(scores, dtype=np.float32)
    keep = np.ones(scores.shape, dtype=np.uint8)
    if k <= 0 or scores.shape[1] == 0:
        return keep
    # stable sort: among equal scores the smaller column index comes first
    order = np.argsort(scores + np.float32(0.0), axis=1, kind="stable")[:, :k]
    np.put_along_axis(keep, order, 0, axis=1)
    return keep


def popcount_and_or(a, b):
    a = np.frombuffer(a, dtype=np.uint8)
    b = np.frombuffer(b, dtype=np.uint8)
    return int(np.bitwise_count(a & b).sum()), int(np.bitwise_count(a | b).sum())


def popcount_xor(a, b):
    a = np.frombuffer(a, dtype=np.uint8)
    b = np.frombuffer(b, dtype=np.uint8)
    return int(np.bitwise_count(a ^ b).sum())
