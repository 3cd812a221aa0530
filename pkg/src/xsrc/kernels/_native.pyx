# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled reservoir state-evolution kernels.

Same arithmetic as the pure backend, with the per-step loop in C. The CSR
matvec accumulates in index order, matching scipy's csr dot; the dense input
matvec in ``step`` goes through BLAS; tanh comes from libm and may differ
from numpy's vectorized tanh by ~1 ulp.
"""

from libc.math cimport tanh, fabs

from scipy.linalg.cython_blas cimport dgemv

import numpy as np


def drive(double[::1] W_data, int[::1] W_indices, int[::1] W_indptr,
          double[:, ::1] proj, double[::1] r0, double alpha):
    cdef Py_ssize_t n = proj.shape[0]
    cdef Py_ssize_t d = proj.shape[1]
    states = np.empty((n, d))
    r_buf = np.array(r0, dtype=np.float64, copy=True)
    z_buf = np.empty(d)
    cdef double[:, ::1] S = states
    cdef double[::1] r = r_buf
    cdef double[::1] z = z_buf
    cdef Py_ssize_t t, i, k
    cdef double acc
    with nogil:
        for t in range(n):
            for i in range(d):
                acc = 0.0
                for k in range(W_indptr[i], W_indptr[i + 1]):
                    acc += W_data[k] * r[W_indices[k]]
                z[i] = acc + proj[t, i]
            for i in range(d):
                r[i] = r[i] + alpha * (tanh(z[i]) - r[i])
                S[t, i] = r[i]
    return states


def step(double[::1] W_data, int[::1] W_indices, int[::1] W_indptr,
         double[:, ::1] W_in, double[::1] u, double[::1] r_in, double alpha):
    cdef Py_ssize_t d = W_in.shape[0]
    r_next = np.empty(d)
    z_buf = np.empty(d)
    cdef double[::1] r2 = r_next
    cdef double[::1] z = z_buf
    cdef double[::1] r = r_in
    cdef Py_ssize_t i, k
    cdef double acc, pre = 0.0
    # BLAS view: C-order W_in (d, m) is the Fortran (m, d) transpose
    cdef int m = <int> W_in.shape[1]
    cdef int n = <int> d
    cdef int inc = 1
    cdef double one = 1.0
    cdef char trans = b'T'
    with nogil:
        for i in range(d):
            acc = 0.0
            for k in range(W_indptr[i], W_indptr[i + 1]):
                acc += W_data[k] * r[W_indices[k]]
            z[i] = acc
        dgemv(&trans, &m, &n, &one, &W_in[0, 0], &m, &u[0], &inc, &one, &z[0], &inc)
        for i in range(d):
            if fabs(z[i]) > pre:
                pre = fabs(z[i])
            r2[i] = r[i] + alpha * (tanh(z[i]) - r[i])
    return r_next, pre
