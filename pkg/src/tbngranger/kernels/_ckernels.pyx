# cython: language_level=3
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef inline void _rhs(const double* x, double* out, Py_ssize_t P, double forcing) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(P):
        out[i] = (x[(i + 1) % P] - x[(i - 2 + P) % P]) * x[(i - 1 + P) % P] - x[i] + forcing


def lorenz96_rk4(x0, double forcing, double dt, Py_ssize_t n_obs, Py_ssize_t substeps, double blowup):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.array(x0, dtype=np.float64)
    cdef Py_ssize_t P = xa.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_obs, P), dtype=np.float64)
    cdef double* x = <double*> malloc(6 * P * sizeof(double))
    cdef double* k1 = x + P
    cdef double* k2 = x + 2 * P
    cdef double* k3 = x + 3 * P
    cdef double* k4 = x + 4 * P
    cdef double* tmp = x + 5 * P
    cdef double half = 0.5 * dt
    cdef double sixth = dt / 6.0
    cdef Py_ssize_t k, s, i
    cdef Py_ssize_t failed = -1
    if x == NULL:
        raise MemoryError()
    try:
        for i in range(P):
            x[i] = xa[i]
        with nogil:
            for k in range(n_obs):
                if k > 0:
                    for s in range(substeps):
                        _rhs(x, k1, P, forcing)
                        for i in range(P):
                            tmp[i] = x[i] + half * k1[i]
                        _rhs(tmp, k2, P, forcing)
                        for i in range(P):
                            tmp[i] = x[i] + half * k2[i]
                        _rhs(tmp, k3, P, forcing)
                        for i in range(P):
                            tmp[i] = x[i] + dt * k3[i]
                        _rhs(tmp, k4, P, forcing)
                        for i in range(P):
                            x[i] = x[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                for i in range(P):
                    out[k, i] = x[i]
                for i in range(P):
                    if not (fabs(x[i]) <= blowup):
                        failed = k
                        break
                if failed >= 0:
                    break
    finally:
        free(x)
    if failed >= 0:
        return out[: failed + 1], failed
    return out, -1


def var_simulate(coefs, init, noise):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] W = np.ascontiguousarray(coefs, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] e = np.ascontiguousarray(noise, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h0 = np.ascontiguousarray(init, dtype=np.float64)
    cdef Py_ssize_t lag = W.shape[0]
    cdef Py_ssize_t T = e.shape[0]
    cdef Py_ssize_t P = e.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] h = np.zeros((T, P), dtype=np.float64)
    cdef Py_ssize_t t, l, i, j
    cdef double acc, dot
    for t in range(min(lag, T)):
        for i in range(P):
            h[t, i] = h0[t, i]
    with nogil:
        for t in range(lag, T):
            for i in range(P):
                acc = 0.0
                for l in range(lag):
                    dot = 0.0
                    for j in range(P):
                        dot = dot + W[l, i, j] * h[t - l - 1, j]
                    acc = acc + dot
                h[t, i] = acc + e[t, i]
    return h


cdef void _matmul(const double* a, const double* b, double* c, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s = s + a[i * n + k] * b[k * n + j]
            c[i * n + j] = s


def acyclicity_batch(A, double clamp):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] Aa = np.ascontiguousarray(A, dtype=np.float64)
    cdef Py_ssize_t B = Aa.shape[0]
    cdef Py_ssize_t n = Aa.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] alpha = np.zeros(B, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] grad = np.zeros((B, n, n), dtype=np.float64)
    cdef Py_ssize_t nn = n * n
    cdef double* buf = <double*> malloc(5 * nn * sizeof(double))
    cdef double* M = buf
    cdef double* result = buf + nn
    cdef double* base = buf + 2 * nn
    cdef double* scratch = buf + 3 * nn
    cdef double* swap
    cdef Py_ssize_t b, i, j, e
    cdef double sq, tr
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for i in range(n):
                    for j in range(n):
                        sq = Aa[b, i, j] * Aa[b, i, j]
                        if not (sq < clamp):
                            sq = clamp
                        M[i * n + j] = sq + (1.0 if i == j else 0.0)
                        result[i * n + j] = 1.0 if i == j else 0.0
                        base[i * n + j] = M[i * n + j]
                e = n - 1
                while e:
                    if e & 1:
                        _matmul(result, base, scratch, n)
                        swap = result
                        result = scratch
                        scratch = swap
                    e >>= 1
                    if e:
                        _matmul(base, base, scratch, n)
                        swap = base
                        base = scratch
                        scratch = swap
                # trace(result @ M)
                tr = 0.0
                for i in range(n):
                    sq = 0.0
                    for j in range(n):
                        sq = sq + result[i * n + j] * M[j * n + i]
                    tr = tr + sq
                tr = tr - n
                alpha[b] = tr if tr > 0.0 else 0.0
                for i in range(n):
                    for j in range(n):
                        if Aa[b, i, j] * Aa[b, i, j] < clamp:
                            grad[b, i, j] = n * result[j * n + i] * (2.0 * Aa[b, i, j])
    finally:
        free(buf)
    return alpha, grad


cdef void _insertion_sort(double* v, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double key
    for i in range(1, n):
        key = v[i]
        j = i - 1
        while j >= 0 and v[j] > key:
            v[j + 1] = v[j]
            j -= 1
        v[j + 1] = key


def canonical_bmm(P, X):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] Pa = np.ascontiguousarray(P, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] Xa = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t B = Pa.shape[0]
    cdef Py_ssize_t n = Pa.shape[1]
    cdef Py_ssize_t m = Pa.shape[2]
    cdef Py_ssize_t F = Xa.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((B, n, F), dtype=np.float64)
    cdef double* v = <double*> malloc(max(m, 1) * sizeof(double))
    cdef Py_ssize_t b, i, j, f
    cdef double s
    if v == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for i in range(n):
                    for f in range(F):
                        for j in range(m):
                            v[j] = Pa[b, i, j] * Xa[b, j, f]
                        _insertion_sort(v, m)
                        s = v[0]
                        for j in range(1, m):
                            s = s + v[j]
                        out[b, i, f] = s + 0.0
    finally:
        free(v)
    return out
