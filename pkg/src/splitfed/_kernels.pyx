# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback``; results are bit-identical."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, ::1] xp, Py_ssize_t kernel, Py_ssize_t stride, Py_ssize_t out_len):
    cdef Py_ssize_t n_batch = xp.shape[0], channels = xp.shape[1]
    cdef Py_ssize_t n, l, c, k, base, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_batch, out_len, channels * kernel), dtype=dtype)
    cdef real[:, :, ::1] o = out
    with nogil:
        for n in range(n_batch):
            for l in range(out_len):
                base = l * stride
                col = 0
                for c in range(channels):
                    for k in range(kernel):
                        o[n, l, col] = xp[n, c, base + k]
                        col = col + 1
    return out


def col2im(real[:, :, ::1] dcols, Py_ssize_t channels, Py_ssize_t kernel,
           Py_ssize_t stride, Py_ssize_t padded_len):
    cdef Py_ssize_t n_batch = dcols.shape[0], out_len = dcols.shape[1]
    cdef Py_ssize_t n, l, c, k
    dtype = np.float32 if real is float else np.float64
    dxp = np.zeros((n_batch, channels, padded_len), dtype=dtype)
    cdef real[:, :, ::1] d = dxp
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for k in range(kernel):
                    for l in range(out_len):
                        d[n, c, l * stride + k] += dcols[n, l, c * kernel + k]
    return dxp


def topk_indices(real[::1] flat, Py_ssize_t k):
    cdef Py_ssize_t n = flat.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.uint32)
    mags_arr = np.abs(np.asarray(flat))
    cdef real[::1] mags = mags_arr
    cdef real thresh = np.partition(mags_arr, n - k)[n - k]
    cdef Py_ssize_t i, above = 0, need, filled = 0
    for i in range(n):
        if mags[i] > thresh:
            above += 1
    need = k - above
    out = np.empty(k, dtype=np.uint32)
    cdef cnp.uint32_t[::1] o = out
    with nogil:
        for i in range(n):
            if mags[i] > thresh:
                o[filled] = <cnp.uint32_t>i
                filled += 1
            elif mags[i] == thresh and need > 0:
                o[filled] = <cnp.uint32_t>i
                filled += 1
                need -= 1
    return out
