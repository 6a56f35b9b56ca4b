# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled IVF scan kernels.

Fused posting-list scan and bounded top-k selection. A candidate ranks above
another when its score is higher, or the scores are equal and its id is
smaller. ``_ivf_py`` holds the numpy equivalent with identical signatures.
"""

import numpy as np
from cython.parallel import prange


cdef inline bint _below(double s1, long long i1, double s2, long long i2) noexcept nogil:
    return s1 < s2 or (s1 == s2 and i1 > i2)


cdef inline void _sift_down(double* s, long long* ids, Py_ssize_t n, Py_ssize_t pos) noexcept nogil:
    # Min-heap on rank: the root is the worst kept candidate.
    cdef Py_ssize_t child
    cdef double ts
    cdef long long ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and _below(s[child + 1], ids[child + 1], s[child], ids[child]):
            child += 1
        if _below(s[child], ids[child], s[pos], ids[pos]):
            ts = s[pos]; s[pos] = s[child]; s[child] = ts
            ti = ids[pos]; ids[pos] = ids[child]; ids[child] = ti
            pos = child
        else:
            break


cdef inline void _sift_up(double* s, long long* ids, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t parent
    cdef double ts
    cdef long long ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _below(s[pos], ids[pos], s[parent], ids[parent]):
            ts = s[pos]; s[pos] = s[parent]; s[parent] = ts
            ti = ids[pos]; ids[pos] = ids[parent]; ids[parent] = ti
            pos = parent
        else:
            break


cdef Py_ssize_t _scan_one(
    const double* q,
    const long long[::1] lists,
    const long long[::1] offsets,
    const long long[::1] ids,
    const float[:, ::1] vectors,
    Py_ssize_t k,
    double* out_s,
    long long* out_i,
) noexcept nogil:
    cdef Py_ssize_t dim = vectors.shape[1]
    cdef Py_ssize_t size = 0, li, row, j, last
    cdef long long lst, cid
    cdef double acc, ts, a0, a1, a2, a3
    cdef long long ti
    cdef const float* v
    for li in range(lists.shape[0]):
        lst = lists[li]
        for row in range(offsets[lst], offsets[lst + 1]):
            v = &vectors[row, 0]
            # Four fixed partial sums: fast, and the summation order never varies.
            a0 = 0.0; a1 = 0.0; a2 = 0.0; a3 = 0.0
            j = 0
            while j + 4 <= dim:
                a0 = a0 + <double>v[j] * q[j]
                a1 = a1 + <double>v[j + 1] * q[j + 1]
                a2 = a2 + <double>v[j + 2] * q[j + 2]
                a3 = a3 + <double>v[j + 3] * q[j + 3]
                j += 4
            while j < dim:
                a0 = a0 + <double>v[j] * q[j]
                j += 1
            acc = (a0 + a1) + (a2 + a3)
            cid = ids[row]
            if size < k:
                out_s[size] = acc
                out_i[size] = cid
                size += 1
                _sift_up(out_s, out_i, size - 1)
            elif _below(out_s[0], out_i[0], acc, cid):
                out_s[0] = acc
                out_i[0] = cid
                _sift_down(out_s, out_i, size, 0)
    # Heap-sort in place: repeatedly move the worst to the end -> best-first order.
    last = size
    while last > 1:
        last -= 1
        ts = out_s[0]; out_s[0] = out_s[last]; out_s[last] = ts
        ti = out_i[0]; out_i[0] = out_i[last]; out_i[last] = ti
        _sift_down(out_s, out_i, last, 0)
    return size


def scan_topk_batch(
    const double[:, ::1] queries,
    const long long[:, ::1] probes,
    const long long[::1] offsets,
    const long long[::1] ids,
    const float[:, ::1] vectors,
    Py_ssize_t k,
    int threads=1,
):
    """Top-``k`` (ids, scores, counts) per query over its probed lists.

    Rows past ``counts[q]`` are padding (id -1, score -inf).
    """
    cdef Py_ssize_t nq = queries.shape[0]
    out_ids = np.full((nq, k), -1, dtype=np.int64)
    out_scores = np.full((nq, k), -np.inf, dtype=np.float64)
    counts = np.zeros(nq, dtype=np.int64)
    cdef long long[:, ::1] oi = out_ids
    cdef double[:, ::1] os = out_scores
    cdef long long[::1] oc = counts
    cdef Py_ssize_t qi
    cdef int nt = threads if threads > 1 else 1
    if nq == 0 or k == 0:
        return out_ids, out_scores, counts
    for qi in prange(nq, nogil=True, num_threads=nt, schedule="dynamic"):
        oc[qi] = _scan_one(&queries[qi, 0], probes[qi], offsets, ids, vectors, k, &os[qi, 0], &oi[qi, 0])
    return out_ids, out_scores, counts
