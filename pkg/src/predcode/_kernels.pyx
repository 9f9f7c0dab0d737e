# cython: language_level=3
"""Compiled dense kernels.

Every output entry is accumulated as ``((0 + p_0) + p_1) + ...`` with the
products taken in ascending inner index. ``_fallback`` performs the same
sequence of IEEE operations, so both backends agree bit for bit. The loops
release the GIL so the layer-parallel engine can overlap them on threads.
"""

import numpy as np


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t inner = a.shape[1]
    cdef Py_ssize_t m = b.shape[1]
    if b.shape[0] != inner:
        raise ValueError(f"matmul: inner dims differ ({inner} vs {b.shape[0]})")
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, k, j
    cdef double aik
    cdef double* crow
    cdef const double* brow
    if n == 0 or m == 0:
        return out
    with nogil:
        for i in range(n):
            crow = &c[i, 0]
            for k in range(inner):
                aik = a[i, k]
                brow = &b[k, 0]
                for j in range(m):
                    crow[j] = crow[j] + aik * brow[j]
    return out


def matmul_tn(const double[:, ::1] a, const double[:, ::1] b):
    """``a.T @ b`` without materialising the transpose."""
    cdef Py_ssize_t inner = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t m = b.shape[1]
    if b.shape[0] != inner:
        raise ValueError(f"matmul_tn: inner dims differ ({inner} vs {b.shape[0]})")
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, k, j
    cdef double aki
    cdef double* crow
    cdef const double* brow
    if n == 0 or m == 0:
        return out
    with nogil:
        for k in range(inner):
            brow = &b[k, 0]
            for i in range(n):
                aki = a[k, i]
                crow = &c[i, 0]
                for j in range(m):
                    crow[j] = crow[j] + aki * brow[j]
    return out


def batch_outer(const double[:, ::1] u, const double[:, ::1] v):
    """Sum over columns of ``u[:, b] v[:, b]^T``, columns in ascending order."""
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t batch = u.shape[1]
    cdef Py_ssize_t m = v.shape[0]
    if v.shape[1] != batch:
        raise ValueError(f"batch_outer: batch sizes differ ({batch} vs {v.shape[1]})")
    vt_arr = np.ascontiguousarray(np.asarray(v).T)
    cdef const double[:, ::1] vt = vt_arr
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, s, j
    cdef double uis
    cdef double* crow
    cdef const double* vrow
    if n == 0 or m == 0:
        return out
    with nogil:
        for i in range(n):
            crow = &c[i, 0]
            for s in range(batch):
                uis = u[i, s]
                vrow = &vt[s, 0]
                for j in range(m):
                    crow[j] = crow[j] + uis * vrow[j]
    return out
