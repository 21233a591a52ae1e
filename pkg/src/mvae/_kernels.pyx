# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``mvae.kernels`` picks one at import time.  The integer RNG
paths are bit-identical between the two; float reductions agree to a few
ulps (summation order differs).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, exp, sqrt, cos, fabs
from libc.stdint cimport uint32_t, uint64_t

cnp.import_array()

cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline void _philox(uint64_t block, uint64_t stream, uint64_t seed,
                         uint64_t* w0, uint64_t* w1) noexcept nogil:
    cdef uint32_t c0 = <uint32_t>block
    cdef uint32_t c1 = <uint32_t>(block >> 32)
    cdef uint32_t c2 = <uint32_t>stream
    cdef uint32_t c3 = <uint32_t>(stream >> 32)
    cdef uint32_t k0 = <uint32_t>seed
    cdef uint32_t k1 = <uint32_t>(seed >> 32)
    cdef uint64_t p0, p1
    cdef uint32_t n0, n1, n2, n3
    cdef int r
    for r in range(10):
        p0 = <uint64_t>0xD2511F53 * c0
        p1 = <uint64_t>0xCD9E8D57 * c2
        n0 = (<uint32_t>(p1 >> 32)) ^ c1 ^ k0
        n1 = <uint32_t>p1
        n2 = (<uint32_t>(p0 >> 32)) ^ c3 ^ k1
        n3 = <uint32_t>p0
        c0 = n0
        c1 = n1
        c2 = n2
        c3 = n3
        k0 = k0 + <uint32_t>0x9E3779B9
        k1 = k1 + <uint32_t>0xBB67AE85
    w0[0] = (<uint64_t>c0) | ((<uint64_t>c1) << 32)
    w1[0] = (<uint64_t>c2) | ((<uint64_t>c3) << 32)


def philox_blocks(uint64_t seed, uint64_t stream, uint64_t counter, Py_ssize_t n_blocks):
    """Raw Philox4x32-10 output, two uint64 words per block."""
    out = np.empty(2 * n_blocks, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t b
    cdef uint64_t w0, w1
    with nogil:
        for b in range(n_blocks):
            _philox(counter + <uint64_t>b, stream, seed, &w0, &w1)
            o[2 * b] = w0
            o[2 * b + 1] = w1
    return out


def philox_uniform(uint64_t seed, uint64_t stream, uint64_t counter, Py_ssize_t n):
    """n doubles in [0, 1); consumes ceil(n / 2) blocks."""
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, n_blocks = (n + 1) // 2
    cdef uint64_t w0, w1
    with nogil:
        for b in range(n_blocks):
            _philox(counter + <uint64_t>b, stream, seed, &w0, &w1)
            o[2 * b] = <double>(w0 >> 11) * INV_2_53
            if 2 * b + 1 < n:
                o[2 * b + 1] = <double>(w1 >> 11) * INV_2_53
    return out


def philox_normal(uint64_t seed, uint64_t stream, uint64_t counter, Py_ssize_t n):
    """n standard normals by Box-Muller (cosine branch); consumes n blocks."""
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b
    cdef uint64_t w0, w1
    cdef double u1, u2
    with nogil:
        for b in range(n):
            _philox(counter + <uint64_t>b, stream, seed, &w0, &w1)
            u1 = <double>(w0 >> 11) * INV_2_53
            u2 = <double>(w1 >> 11) * INV_2_53
            o[b] = sqrt(-2.0 * log(1.0 - u1)) * cos(TWO_PI * u2)
    return out


def logsumexp_rows(const double[:, ::1] x):
    """Row-wise max + log(sum(exp(x - max)))."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                s += exp(x[i, j] - mx)
            o[i] = mx + log(s)
    return out


def bernoulli_logit_loglik_rows(const double[:, ::1] logits, const double[:, ::1] x):
    """Row sums of x*l - softplus(l), evaluated without overflow."""
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1], i, j
    # numpy's vectorised exp/log1p beat scalar libm calls; the fused row loop saves temporaries
    tail_arr = np.log1p(np.exp(-np.abs(np.asarray(logits))))
    cdef const double[:, ::1] tail = tail_arr
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double l, s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(m):
                l = logits[i, j]
                s += x[i, j] * l - ((l if l > 0.0 else 0.0) + tail[i, j])
            o[i] = s
    return out


def bernoulli_logit_grad(const double[:, ::1] logits, const double[:, ::1] x):
    """Elementwise x - sigmoid(l)."""
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double l, e
    with nogil:
        for i in range(n):
            for j in range(m):
                l = logits[i, j]
                if l >= 0.0:
                    o[i, j] = x[i, j] - 1.0 / (1.0 + exp(-l))
                else:
                    e = exp(l)
                    o[i, j] = x[i, j] - e / (1.0 + e)
    return out
