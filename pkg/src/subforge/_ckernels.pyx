# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Signatures mirror ``subforge._pykernels`` exactly."""

from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t
from libc.string cimport memcpy
from libcpp.vector cimport vector
from libcpp.algorithm cimport nth_element

import numpy as np

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def splitmix64_stream(state, Py_ssize_t n):
    cdef uint64_t s = <uint64_t>state
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] view = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            s += GAMMA
            view[i] = _mix(s)
    return out, int(s)


def fisher_yates_prefix(Py_ssize_t n, Py_ssize_t count, seed):
    cdef uint64_t s = <uint64_t>seed
    idx = np.arange(n, dtype=np.int64)
    cdef int64_t[::1] v = idx
    cdef Py_ssize_t i, j
    cdef int64_t tmp
    if count > n:
        count = n
    with nogil:
        for i in range(count):
            s += GAMMA
            j = i + <Py_ssize_t>(_mix(s) % <uint64_t>(n - i))
            tmp = v[i]
            v[i] = v[j]
            v[j] = tmp
    return [int(x) for x in idx[:count]]


def fnv1a64(const uint8_t[::1] data):
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    with nogil:
        for i in range(data.shape[0]):
            h = (h ^ data[i]) * FNV_PRIME
    return int(h)


def prune_lowest(const float[:, ::1] scores, Py_ssize_t k):
    cdef Py_ssize_t g = scores.shape[0], n = scores.shape[1]
    keep = np.ones((g, n), dtype=np.uint8)
    cdef uint8_t[:, ::1] kv = keep
    cdef vector[uint64_t] keys
    cdef Py_ssize_t r, c
    cdef uint32_t bits
    cdef float f
    if k <= 0 or n == 0:
        return keep
    if k >= n:
        keep[:, :] = 0
        return keep
    keys.resize(n)
    with nogil:
        for r in range(g):
            for c in range(n):
                f = scores[r, c] + 0.0  # folds -0.0 onto +0.0
                memcpy(&bits, &f, 4)
                keys[c] = ((<uint64_t>bits) << 32) | <uint64_t>c
            nth_element(keys.begin(), keys.begin() + k, keys.end())
            for c in range(k):
                kv[r, keys[c] & 0xFFFFFFFFULL] = 0
    return keep


def popcount_and_or(const uint8_t[::1] a, const uint8_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], i, words = n // 8
    cdef uint64_t wa, wb
    cdef long long inter = 0, union = 0
    with nogil:
        for i in range(words):
            memcpy(&wa, &a[i * 8], 8)
            memcpy(&wb, &b[i * 8], 8)
            inter += __builtin_popcountll(wa & wb)
            union += __builtin_popcountll(wa | wb)
        for i in range(words * 8, n):
            inter += __builtin_popcountll(a[i] & b[i])
            union += __builtin_popcountll(a[i] | b[i])
    return int(inter), int(union)


def popcount_xor(const uint8_t[::1] a, const uint8_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], i, words = n // 8
    cdef uint64_t wa, wb
    cdef long long total = 0
    with nogil:
        for i in range(words):
            memcpy(&wa, &a[i * 8], 8)
            memcpy(&wb, &b[i * 8], 8)
            total += __builtin_popcountll(wa ^ wb)
        for i in range(words * 8, n):
            total += __builtin_popcountll(a[i] ^ b[i])
    return int(total)
