# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Hamming scan over packed uint64 codes."""

import numpy as np

from libc.stdint cimport int32_t, int64_t, uint64_t
from libc.stdlib cimport free, malloc


cdef extern from *:
    int __builtin_popcountll(unsigned long long x) nogil


cdef inline void _scan(const uint64_t[::1] query, const uint64_t[:, ::1] db,
                       int32_t[::1] out) noexcept nogil:
    cdef Py_ssize_t n = db.shape[0], w = db.shape[1], i, j
    cdef int32_t acc
    for i in range(n):
        acc = 0
        for j in range(w):
            acc += __builtin_popcountll(query[j] ^ db[i, j])
        out[i] = acc


cdef int _rank(const int32_t[::1] dist, int max_dist, Py_ssize_t topk,
               int64_t[::1] ids, int32_t[::1] dout) noexcept nogil:
    # counting sort keyed by distance; scanning ids in order keeps ties ascending
    cdef Py_ssize_t n = dist.shape[0], i, total = 0, c
    cdef Py_ssize_t* start = <Py_ssize_t*> malloc((max_dist + 2) * sizeof(Py_ssize_t))
    if start == NULL:
        return -1
    for i in range(max_dist + 2):
        start[i] = 0
    for i in range(n):
        start[dist[i] + 1] += 1
    for i in range(max_dist + 1):
        start[i + 1] += start[i]
    for i in range(n):
        c = start[dist[i]]
        if c < topk:
            ids[c] = i
            dout[c] = dist[i]
        start[dist[i]] = c + 1
    free(start)
    return 0


def hamming_scan(const uint64_t[::1] query, const uint64_t[:, ::1] db):
    """Distances from one packed query to every packed database row."""
    if query.shape[0] != db.shape[1]:
        raise ValueError("query and database word counts differ")
    out = np.empty(db.shape[0], dtype=np.int32)
    cdef int32_t[::1] o = out
    with nogil:
        _scan(query, db, o)
    return out


def rank_by_distance(const int32_t[::1] dist, int max_dist, Py_ssize_t topk):
    """First ``topk`` ids ordered by (distance, id), with their distances."""
    cdef Py_ssize_t k = min(topk, dist.shape[0])
    ids = np.empty(k, dtype=np.int64)
    dout = np.empty(k, dtype=np.int32)
    cdef int64_t[::1] iv = ids
    cdef int32_t[::1] dv = dout
    cdef int rc
    with nogil:
        rc = _rank(dist, max_dist, k, iv, dv)
    if rc != 0:
        raise MemoryError()
    return ids, dout


def search_packed(const uint64_t[:, ::1] queries, const uint64_t[:, ::1] db,
                  int q, Py_ssize_t topk):
    """Exact top-k for every query; returns ``(ids, dists)`` of shape (nq, k)."""
    if queries.shape[1] != db.shape[1]:
        raise ValueError("query and database word counts differ")
    cdef Py_ssize_t nq = queries.shape[0], n = db.shape[0], t
    cdef Py_ssize_t k = min(topk, n)
    ids = np.empty((nq, k), dtype=np.int64)
    dists = np.empty((nq, k), dtype=np.int32)
    scratch = np.empty(n, dtype=np.int32)
    cdef int64_t[:, ::1] iv = ids
    cdef int32_t[:, ::1] dv = dists
    cdef int32_t[::1] sv = scratch
    cdef int rc = 0
    with nogil:
        for t in range(nq):
            _scan(queries[t], db, sv)
            rc = _rank(sv, q, k, iv[t], dv[t])
            if rc != 0:
                break
    if rc != 0:
        raise MemoryError()
    return ids, dists
