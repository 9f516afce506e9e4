# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dynamic-programming kernels: word edit distance and CTC forward pass."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def edit_distance(const cnp.int64_t[::1] ref, const cnp.int64_t[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0], i, j
    cdef cnp.int64_t[::1] prev = np.arange(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef cnp.int64_t best, cand
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            cand = prev[j] + 1
            if cand < best:
                best = cand
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


cdef inline double _lse2(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


def ctc_nll(const double[:, ::1] log_probs, const cnp.int64_t[::1] target, cnp.int64_t blank):
    """Negative log-likelihood of ``target`` under per-frame ``log_probs[T, K]``."""
    cdef Py_ssize_t T = log_probs.shape[0], L = target.shape[0]
    cdef Py_ssize_t S = 2 * L + 1, s, t
    cdef double[::1] alpha = np.full(S, -INFINITY)
    cdef double[::1] nxt = np.empty(S)
    cdef double[::1] tmp
    cdef cnp.int64_t[::1] ext = np.empty(S, dtype=np.int64)
    cdef double acc
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else target[s // 2]
    if T == 0:
        return INFINITY if L > 0 else 0.0
    alpha[0] = log_probs[0, blank]
    if S > 1:
        alpha[1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[s]
            if s >= 1:
                acc = _lse2(acc, alpha[s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                acc = _lse2(acc, alpha[s - 2])
            nxt[s] = acc + log_probs[t, ext[s]] if acc != -INFINITY else -INFINITY
        tmp = alpha
        alpha = nxt
        nxt = tmp
    acc = alpha[S - 1]
    if S > 1:
        acc = _lse2(acc, alpha[S - 2])
    return -acc
