# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; semantics match ``_kernels_py`` bit for bit."""

import numpy as np
cimport numpy as cnp
from libc.math cimport frexp, ldexp, rint, fabs, copysign, INFINITY

cnp.import_array()

BACKEND = "cython"


cdef inline double _round1(double v, int man, int emin, double maxf) noexcept nogil:
    cdef double a = fabs(v)
    cdef int e2
    cdef int e
    cdef double q, r
    if a >= maxf:
        return copysign(maxf, v)
    frexp(a, &e2)
    e = e2 - 1
    if e < emin:
        e = emin
    q = ldexp(1.0, e - man)
    r = rint(a / q) * q
    if r > maxf:
        r = maxf
    return copysign(r, v)


def round_float(x, int mantissa_bits, int min_exp, double max_finite):
    cdef cnp.ndarray[cnp.float32_t, ndim=1] src = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] dst = np.empty_like(src)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = <float>_round1(<double>src[i], mantissa_bits, min_exp, max_finite)
    return dst.reshape(np.shape(x))


def block_stats(x, int tile_rows, int tile_cols):
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t rows = a.shape[0], cols = a.shape[1]
    cdef Py_ssize_t nbr = (rows + tile_rows - 1) // tile_rows
    cdef Py_ssize_t nbc = (cols + tile_cols - 1) // tile_cols
    cdef cnp.ndarray[cnp.float32_t, ndim=2] amax = np.zeros((nbr, nbc), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] minabs = np.full((nbr, nbc), np.inf, dtype=np.float32)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] nnz = np.zeros((nbr, nbc), dtype=np.int64)
    cdef Py_ssize_t i, j, bi, bj
    cdef float v
    with nogil:
        for i in range(rows):
            bi = i // tile_rows
            for j in range(cols):
                bj = j // tile_cols
                v = a[i, j]
                if v < 0:
                    v = -v
                if v > amax[bi, bj]:
                    amax[bi, bj] = v
                if v > 0:
                    nnz[bi, bj] += 1
                    if v < minabs[bi, bj]:
                        minabs[bi, bj] = v
    return amax, minabs, nnz


def fake_quant_grid(x, int tile_rows, int tile_cols, scales, int mantissa_bits,
                    int min_exp, double max_finite):
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a = np.ascontiguousarray(x, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] s = np.ascontiguousarray(scales, dtype=np.float32)
    cdef Py_ssize_t rows = a.shape[0], cols = a.shape[1]
    cdef Py_ssize_t nbr = s.shape[0], nbc = s.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] rounded = np.empty((rows, cols), dtype=np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] err = np.zeros((nbr, nbc), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] nnz = np.zeros((nbr, nbc), dtype=np.int64)
    cdef Py_ssize_t bi, bj, i, j, i1, j1
    cdef float sc, xv, scaled, r, out
    cdef double acc, xd
    if nbr * tile_rows < rows or nbc * tile_cols < cols:
        raise ValueError("scale grid does not cover the tensor")
    with nogil:
        # block-major traversal keeps the per-tile sum in row-major order
        for bi in range(nbr):
            i1 = min((bi + 1) * tile_rows, rows)
            for bj in range(nbc):
                j1 = min((bj + 1) * tile_cols, cols)
                sc = s[bi, bj]
                acc = 0.0
                for i in range(bi * tile_rows, i1):
                    for j in range(bj * tile_cols, j1):
                        xv = a[i, j]
                        scaled = xv * sc
                        r = <float>_round1(<double>scaled, mantissa_bits, min_exp, max_finite)
                        rounded[i, j] = r
                        if xv != 0:
                            out = r / sc
                            xd = <double>xv
                            acc = acc + fabs(xd - <double>out) / fabs(xd)
                            nnz[bi, bj] += 1
                err[bi, bj] = acc
    return rounded, err, nnz


def gemm_f32(a_in, b_in):
    cdef cnp.ndarray[cnp.float32_t, ndim=2] a = np.ascontiguousarray(a_in, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=2] b = np.ascontiguousarray(b_in, dtype=np.float32)
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(f"inner dimensions differ: {a_in.shape} @ {b_in.shape}")
    cdef cnp.ndarray[cnp.float32_t, ndim=2] c = np.zeros((m, n), dtype=np.float32)
    cdef Py_ssize_t i, j, kk
    cdef float acc, prod
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for kk in range(k):
                    prod = a[i, kk] * b[kk, j]
                    acc = acc + prod
                c[i, j] = acc
    return c
