# cython: language_level=3
"""Compiled hot kernels; mirrors ``fpq._fallback`` bit for bit."""

from libc.math cimport fabs, rint

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF INT_MODE = 0


cdef inline unsigned char _nearest(double a, const double[::1] mags,
                                   const unsigned char[::1] mcodes) noexcept nogil:
    cdef Py_ssize_t n = mags.shape[0]
    cdef Py_ssize_t lo = 0, hi = n, mid
    # first index with mags[k] >= a
    while lo < hi:
        mid = (lo + hi) >> 1
        if mags[mid] < a:
            lo = mid + 1
        else:
            hi = mid
    cdef Py_ssize_t k = lo
    if k < 1:
        k = 1
    elif k > n - 1:
        k = n - 1
    cdef double d_lo = a - mags[k - 1]
    cdef double d_hi = mags[k] - a
    cdef unsigned char c_lo = mcodes[k - 1]
    cdef unsigned char c_hi = mcodes[k]
    if d_hi < d_lo:
        return c_hi
    if d_hi == d_lo and (c_hi & 1) == 0 and (c_lo & 1) == 1:
        return c_hi
    return c_lo


def encode_nearest(const double[::1] x, const double[::1] mags,
                   const unsigned char[::1] mcodes, int sign_mask,
                   unsigned char[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    cdef unsigned char c
    cdef unsigned char smask = <unsigned char>sign_mask
    with nogil:
        for i in range(n):
            v = x[i]
            c = _nearest(fabs(v), mags, mcodes)
            if v < 0:
                c = c | smask
            out[i] = c


def gptq_columns(double[:, ::1] W1, const double[:, ::1] Hinv1,
                 Py_ssize_t start, Py_ssize_t stop,
                 const double[::1] scale, const double[::1] zero,
                 int mode, double qmin, double qmax,
                 const double[::1] mags, const unsigned char[::1] mcodes,
                 int sign_mask, const double[::1] table,
                 double[:, ::1] Q1, double[:, ::1] Err1, long long[:, ::1] codes):
    cdef Py_ssize_t rows = W1.shape[0], b = W1.shape[1]
    cdef Py_ssize_t i, j, r
    cdef double w, s, c, q, err, d
    cdef unsigned char fc
    cdef unsigned char smask = <unsigned char>sign_mask
    with nogil:
        for i in range(start, stop):
            d = Hinv1[i, i]
            for r in range(rows):
                w = W1[r, i]
                s = scale[r]
                if mode == INT_MODE:
                    c = rint(w / s) + zero[r]
                    if c < qmin:
                        c = qmin
                    elif c > qmax:
                        c = qmax
                    q = s * (c - zero[r])
                    codes[r, i] = <long long>c
                else:
                    w = w / s
                    fc = _nearest(fabs(w), mags, mcodes)
                    if w < 0:
                        fc = fc | smask
                    q = s * table[fc]
                    codes[r, i] = fc
                    w = W1[r, i]
                err = (w - q) / d
                for j in range(i + 1, b):
                    W1[r, j] = W1[r, j] - err * Hinv1[i, j]
                Q1[r, i] = q
                Err1[r, i] = err
