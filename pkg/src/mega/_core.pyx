# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: same API as mega._kernels_numpy, BLAS-backed.

All matrices are C-contiguous float64. BLAS is column-major, so every GEMM
call below runs on the transposed view (C^T = B^T A^T).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm, dgemv

cnp.import_array()


cdef void _mm_nn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c(M,N) = a(M,K) @ b(K,N), all row-major
    cdef int M = a.shape[0], K = a.shape[1], N = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    dgemm(&tn, &tn, &N, &M, &K, &one, &b[0, 0], &N, &a[0, 0], &K, &zero, &c[0, 0], &N)


cdef void _mm_tn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c(N1,N2) = a(K,N1)^T @ b(K,N2), all row-major
    cdef int K = a.shape[0], N1 = a.shape[1], N2 = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'
    dgemm(&tn, &tt, &N2, &N1, &K, &one, &b[0, 0], &N2, &a[0, 0], &N1, &zero, &c[0, 0], &N2)


cdef void _mm_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c(M,K) = a(M,N) @ b(K,N)^T, all row-major
    cdef int M = a.shape[0], N = a.shape[1], K = b.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'
    dgemm(&tt, &tn, &K, &M, &N, &one, &b[0, 0], &N, &a[0, 0], &N, &zero, &c[0, 0], &K)


def dense_fwd(double[:, ::1] x, double[:, ::1] W, double[::1] b, bint relu):
    """y = x @ W + b, optionally ReLU'd. Returns (y, pre)."""
    cdef int B = x.shape[0], m = W.shape[1]
    pre_arr = np.empty((B, m), dtype=np.float64)
    cdef double[:, ::1] pre = pre_arr
    cdef double[:, ::1] y
    cdef Py_ssize_t i, j
    cdef double v
    _mm_nn(x, W, pre)
    if relu:
        y_arr = np.empty((B, m), dtype=np.float64)
        y = y_arr
        with nogil:
            for i in range(B):
                for j in range(m):
                    v = pre[i, j] + b[j]
                    pre[i, j] = v
                    y[i, j] = v if v > 0.0 else 0.0
        return y_arr, pre_arr
    with nogil:
        for i in range(B):
            for j in range(m):
                pre[i, j] += b[j]
    return pre_arr, pre_arr


def dense_bwd(double[:, ::1] x, double[:, ::1] pre, double[:, ::1] W,
              double[:, ::1] dy, bint relu, bint need_dx=True, bint need_dparams=True):
    """Backward of dense_fwd. Returns (dx, dW, db)."""
    cdef int B = x.shape[0], n = x.shape[1], m = W.shape[1]
    cdef double[:, ::1] dpre
    cdef double[:, ::1] dW_v, dx_v
    cdef double[::1] db_v
    cdef Py_ssize_t i, j
    dW_arr = db_arr = dx_arr = None
    if relu:
        dpre_arr = np.empty((B, m), dtype=np.float64)
        dpre = dpre_arr
        with nogil:
            for i in range(B):
                for j in range(m):
                    dpre[i, j] = dy[i, j] if pre[i, j] > 0.0 else 0.0
    else:
        dpre = dy
    if need_dparams:
        dW_arr = np.empty((n, m), dtype=np.float64)
        db_arr = np.zeros(m, dtype=np.float64)
        dW_v = dW_arr
        db_v = db_arr
        _mm_tn(x, dpre, dW_v)
        with nogil:
            for i in range(B):
                for j in range(m):
                    db_v[j] += dpre[i, j]
    if need_dx:
        dx_arr = np.empty((B, n), dtype=np.float64)
        dx_v = dx_arr
        _mm_nt(dpre, W, dx_v)
    return dx_arr, dW_arr, db_arr


def weighted_sum(double[:, :, ::1] stack, double[::1] w):
    """sum_j w[j] * stack[j] for stack (J, B, D) -> (B, D)."""
    cdef int J = stack.shape[0], B = stack.shape[1], D = stack.shape[2]
    cdef int flat = B * D, inc = 1
    out_arr = np.empty((B, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    with nogil:
        # column-major view of stack is (B*D, J) with leading dim B*D
        dgemv(&tn, &flat, &J, &one, &stack[0, 0, 0], &flat, &w[0], &inc,
              &zero, &out[0, 0], &inc)
    return out_arr


def scaled_add(double[:, ::1] dst, double[:, ::1] src, double alpha):
    """dst += alpha * src, in place."""
    cdef Py_ssize_t i, j
    cdef Py_ssize_t B = dst.shape[0], D = dst.shape[1]
    with nogil:
        for i in range(B):
            for j in range(D):
                dst[i, j] += alpha * src[i, j]


def adam_step(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
              long t, double lr, double beta1, double beta2, double eps):
    """One Adam update, in place on flat arrays (t is the 1-based step)."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double a = lr / bc1
    cdef double mi, vi
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = mi
            v[i] = vi
            p[i] -= a * mi / (sqrt(vi / bc2) + eps)


def soft_update(double[::1] target, double[::1] online, double tau):
    """target = (1 - tau) * target + tau * online, in place."""
    cdef Py_ssize_t i, n = target.shape[0]
    with nogil:
        for i in range(n):
            target[i] = (1.0 - tau) * target[i] + tau * online[i]
