# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for coincidence counting and dead-time filtering."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def fine_coincidences(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b,
                      cnp.int64_t tmin, cnp.int64_t tmax):
    """Count pairs (i, j) with tmin <= b[j] - a[i] <= tmax, per integer lag.

    Both inputs must be sorted ascending. Returns an int64 array of length
    ``tmax - tmin + 1`` indexed by ``lag - tmin``.
    """
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0]
    cdef Py_ssize_t i, j, j0 = 0
    cdef cnp.int64_t lo, hi, ai
    out_arr = np.zeros(tmax - tmin + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    with nogil:
        for i in range(na):
            ai = a[i]
            lo = ai + tmin
            hi = ai + tmax
            while j0 < nb and b[j0] < lo:
                j0 += 1
            j = j0
            while j < nb and b[j] <= hi:
                out[b[j] - lo] += 1
                j += 1
    return out_arr


def dead_time_mask(const cnp.int64_t[::1] keys, cnp.int64_t dead):
    """Keep-mask for a sorted single-channel event sequence with dead time."""
    cdef Py_ssize_t n = keys.shape[0], i
    cdef cnp.int64_t last
    mask_arr = np.ones(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] mask = mask_arr
    if n == 0 or dead <= 0:
        return mask_arr
    last = keys[0]
    with nogil:
        for i in range(1, n):
            if keys[i] - last < dead:
                mask[i] = 0
            else:
                last = keys[i]
    return mask_arr
