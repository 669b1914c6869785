# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF FIRST_TOKEN = 0
DEF MEAN = 1
DEF LAST_TOKEN = 2


def pool_hidden(hidden, mask, int mode):
    cdef const float[:, :, ::1] h = np.ascontiguousarray(hidden, dtype=np.float32)
    cdef const unsigned char[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t B = h.shape[0], T = h.shape[1], D = h.shape[2]
    cdef Py_ssize_t b, t, j, last, count
    out_arr = np.empty((B, D), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef double[::1] acc = np.zeros(D, dtype=np.float64)
    if mode != FIRST_TOKEN and mode != MEAN and mode != LAST_TOKEN:
        raise ValueError(f"unknown pooling mode {mode}")
    for b in range(B):
        count = 0
        last = -1
        for t in range(T):
            if m[b, t]:
                count += 1
                last = t
        if count == 0:
            raise ValueError(f"row {b} has an all-zero attention mask")
        if mode == FIRST_TOKEN:
            for j in range(D):
                out[b, j] = h[b, 0, j]
        elif mode == LAST_TOKEN:
            for j in range(D):
                out[b, j] = h[b, last, j]
        else:
            for j in range(D):
                acc[j] = 0.0
            for t in range(T):
                if m[b, t]:
                    for j in range(D):
                        acc[j] += h[b, t, j]
            for j in range(D):
                out[b, j] = <float>(acc[j] / count)
    return out_arr


def active_mask(scores, double tau):
    arr = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    cdef const double[::1] s = arr
    cdef Py_ssize_t i, n = s.shape[0]
    out_arr = np.zeros(n, dtype=np.uint8)
    if n == 0:
        return out_arr
    cdef unsigned char[::1] out = out_arr
    # numpy's reduction is vectorised; the serial loop was slower
    cdef double peak = arr.max()
    cdef double cutoff
    if peak <= 0.0:
        return out_arr
    cutoff = tau * peak
    for i in range(n):
        out[i] = s[i] >= cutoff
    return out_arr


def accumulate_active(scores, double tau, cnp.int64_t[::1] counts):
    arr = np.ascontiguousarray(scores, dtype=np.float64).ravel()
    cdef const double[::1] s = arr
    cdef Py_ssize_t i, n = s.shape[0]
    cdef long total = 0
    cdef int hit
    cdef double peak, cutoff
    if n == 0:
        return 0
    if counts.shape[0] != n:
        raise ValueError("counts length does not match scores")
    peak = arr.max()
    if peak <= 0.0:
        return 0
    cutoff = tau * peak
    for i in range(n):
        hit = s[i] >= cutoff
        counts[i] += hit
        total += hit
    return total


def argmax_correct(logits, labels):
    cdef const double[:, ::1] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const cnp.int64_t[::1] y = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], i, j, best
    if y.shape[0] != n:
        raise ValueError("labels length does not match logits")
    out_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] out = out_arr
    for i in range(n):
        best = 0
        for j in range(1, k):
            if z[i, j] > z[i, best]:
                best = j
        out[i] = best == y[i]
    return out_arr


def paired_moments(a, b):
    cdef const double[::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double mean = 0.0, ss = 0.0, d
    if w.shape[0] != n:
        raise ValueError("length mismatch")
    if n == 0:
        return float("nan"), 0.0, 0
    for i in range(n):
        mean += x[i] - w[i]
    mean /= n
    for i in range(n):
        d = x[i] - w[i] - mean
        ss += d * d
    return mean, (ss / (n - 1) if n > 1 else 0.0), n
