# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: dense layer passes, the Adam update and reservoir selection.

Arrays are row-major float64. The BLAS calls use the column-major view of
each buffer, so every product below is written for the transposed layout.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def dense_forward(const double[:, ::1] W, const double[::1] b,
                  const double[:, ::1] X, bint relu):
    """Return ``(Z, H)`` with ``Z = X @ W.T + b`` and ``H = relu(Z)`` (or ``Z``)."""
    cdef int n = X.shape[0]
    cdef int fan_in = X.shape[1]
    cdef int fan_out = W.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Z = np.empty((n, fan_out), dtype=np.float64)
    cdef double[:, ::1] zv = Z
    cdef int i, j
    cdef double one = 1.0
    cdef char ta = b'T'
    cdef char tb = b'N'
    for i in range(n):
        for j in range(fan_out):
            zv[i, j] = b[j]
    if n > 0 and fan_out > 0 and fan_in > 0:
        dgemm(&ta, &tb, &fan_out, &n, &fan_in, &one,
              <double*>&W[0, 0], &fan_in, <double*>&X[0, 0], &fan_in,
              &one, &zv[0, 0], &fan_out)
    if not relu:
        return Z, Z
    cdef cnp.ndarray[cnp.float64_t, ndim=2] H = np.empty((n, fan_out), dtype=np.float64)
    cdef double[:, ::1] hv = H
    for i in range(n):
        for j in range(fan_out):
            hv[i, j] = zv[i, j] if zv[i, j] > 0.0 else 0.0
    return Z, H


def dense_backward(const double[:, ::1] W, const double[:, ::1] X,
                   const double[:, ::1] Z, const double[:, ::1] G, bint relu):
    """Return ``(dW, db, dX)`` for upstream gradient ``G`` on the layer output."""
    cdef int n = X.shape[0]
    cdef int fan_in = X.shape[1]
    cdef int fan_out = W.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] GZ = np.empty((n, fan_out), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dW = np.zeros((fan_out, fan_in), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] db = np.zeros(fan_out, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dX = np.zeros((n, fan_in), dtype=np.float64)
    cdef double[:, ::1] gz = GZ
    cdef double[:, ::1] dwv = dW
    cdef double[::1] dbv = db
    cdef double[:, ::1] dxv = dX
    cdef int i, j
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char tn = b'N'
    cdef char tt = b'T'
    for i in range(n):
        for j in range(fan_out):
            if relu and Z[i, j] <= 0.0:
                gz[i, j] = 0.0
            else:
                gz[i, j] = G[i, j]
    for j in range(fan_out):
        for i in range(n):
            dbv[j] += gz[i, j]
    if n > 0 and fan_out > 0 and fan_in > 0:
        dgemm(&tn, &tt, &fan_in, &fan_out, &n, &one,
              <double*>&X[0, 0], &fan_in, &gz[0, 0], &fan_out,
              &zero, &dwv[0, 0], &fan_in)
        dgemm(&tn, &tn, &fan_in, &n, &fan_out, &one,
              <double*>&W[0, 0], &fan_in, &gz[0, 0], &fan_out,
              &zero, &dxv[0, 0], &fan_in)
    return dW, db, dX


def adam_update(double[::1] param, const double[::1] grad, double[::1] m,
                double[::1] v, double lr, double beta1, double beta2,
                double eps, double correction1, double correction2):
    """In-place bias-corrected Adam step over flat buffers."""
    cdef Py_ssize_t k
    cdef double g, mhat, vhat
    for k in range(param.shape[0]):
        g = grad[k]
        m[k] = beta1 * m[k] + (1.0 - beta1) * g
        v[k] = beta2 * v[k] + (1.0 - beta2) * (g * g)
        mhat = m[k] / correction1
        vhat = v[k] / correction2
        param[k] = param[k] - lr * mhat / (sqrt(vhat) + eps)


def reservoir_fill(Py_ssize_t capacity, const long long[::1] draws):
    """Slots after streaming ``len(draws)`` items through Algorithm R.

    ``draws[i]`` must be uniform on ``[0, i]`` (inclusive); it is only read
    once the reservoir is full. Unfilled slots hold -1.
    """
    cdef Py_ssize_t n = draws.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slots = np.full(capacity, -1, dtype=np.int64)
    cdef long long[::1] sv = slots
    cdef Py_ssize_t i
    cdef long long j
    for i in range(n):
        if i < capacity:
            sv[i] = i
        else:
            j = draws[i]
            if j < capacity:
                sv[j] = i
    return slots
