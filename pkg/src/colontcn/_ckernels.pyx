# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dilated-correlation kernels (same contract as ``_npkernels``).

Arrays are C-contiguous float64; weights are tap-major ``w[j, cin, cout]``.
The heavy lifting is a register-blocked multi-tap GEMM in ``tapgemm.h`` that
fuses all k taps into one pass over the output, so no per-tap temporaries.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef extern from "tapgemm.h" nogil:
    void tapgemm(const double* a, Py_ssize_t lda, Py_ssize_t aps, const double* b,
                 Py_ssize_t ldb, const Py_ssize_t* offs, Py_ssize_t ntap, Py_ssize_t K,
                 Py_ssize_t M, Py_ssize_t N, double* out, Py_ssize_t ldo)
    int TAPGEMM_SIMD

SIMD = bool(TAPGEMM_SIMD)

# time-axis block for the weight gradient; keeps the x/g panels in L2
cdef Py_ssize_t KBLOCK = 256


def correlate(const double[:, ::1] x, const double[:, :, ::1] w, Py_ssize_t dilation,
              int sign, double[:, ::1] out):
    """out[t] += sum_j x[t + sign*(j-h)*dilation] @ w[j], zero outside [0, T)."""
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t cin = x.shape[1]
    cdef Py_ssize_t k = w.shape[0]
    cdef Py_ssize_t cout = w.shape[2]
    cdef Py_ssize_t h = (k - 1) // 2
    cdef Py_ssize_t pad = h * dilation
    cdef Py_ssize_t j
    if w.shape[1] != cin or out.shape[0] != T or out.shape[1] != cout:
        raise ValueError("correlate: shape mismatch")
    if T == 0 or cin == 0 or cout == 0:
        return
    if k == 1:
        # pointwise: a plain GEMM, which BLAS does better
        np.asarray(out)[...] += np.asarray(x) @ np.asarray(w[0])
        return
    xp_arr = np.zeros((T + 2 * pad, cin))
    xp_arr[pad:pad + T] = x
    cdef double[:, ::1] xp = xp_arr
    cdef Py_ssize_t[::1] offs = np.empty(k, dtype=np.intp)
    for j in range(k):
        offs[j] = pad + sign * (j - h) * dilation
    with nogil:
        tapgemm(&xp[0, 0], cin, 1, &w[0, 0, 0], cout, &offs[0], k, cin, T, cout,
                &out[0, 0], cout)


def weight_grad(const double[:, ::1] x, const double[:, ::1] g, Py_ssize_t dilation,
                double[:, :, ::1] gw):
    """gw[j, ci, co] += sum_t x[t + (j-h)*dilation, ci] * g[t, co]."""
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t cin = x.shape[1]
    cdef Py_ssize_t cout = g.shape[1]
    cdef Py_ssize_t k = gw.shape[0]
    cdef Py_ssize_t h = (k - 1) // 2
    cdef Py_ssize_t pad = h * dilation
    cdef Py_ssize_t j, t0, kc
    cdef Py_ssize_t zero = 0
    if g.shape[0] != T or gw.shape[1] != cin or gw.shape[2] != cout:
        raise ValueError("weight_grad: shape mismatch")
    if T == 0 or cin == 0 or cout == 0:
        return
    if k == 1:
        np.asarray(gw)[0] += np.asarray(x).T @ np.asarray(g)
        return
    xp_arr = np.zeros((T + 2 * pad, cin))
    xp_arr[pad:pad + T] = x
    cdef double[:, ::1] xp = xp_arr
    with nogil:
        # rows of the GEMM are input channels (stride 1), reduction runs over time (stride cin)
        t0 = 0
        while t0 < T:
            kc = KBLOCK if T - t0 > KBLOCK else T - t0
            for j in range(k):
                tapgemm(&xp[pad + (j - h) * dilation + t0, 0], 1, cin, &g[t0, 0], cout,
                        &zero, 1, kc, cin, cout, &gw[j, 0, 0], cout)
            t0 += kc
