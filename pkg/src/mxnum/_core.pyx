# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: encode, block quantization, blocked dot sums.

Must stay bit-identical to the NumPy fallback in ``_pykernels``; the test
suite compares the two exhaustively.  Reductions use the same fixed pairwise
tree, and the exact combine converts through the same correctly rounded
integer-to-double paths.
"""

from libc.math cimport frexp, ldexp, fabs
from libc.stdint cimport int64_t, uint64_t, uint16_t, int32_t
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

import numpy as np

cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    typedef __int128 mx_i128;
    static inline uint64_t mx_dbl_bits(double x) {
        uint64_t u; memcpy(&u, &x, 8); return u;
    }
    static inline double mx_i128_to_double(mx_i128 v) { return (double)v; }
    """
    ctypedef long long mx_i128
    uint64_t mx_dbl_bits(double x) nogil
    double mx_i128_to_double(mx_i128 v) nogil

DEF POLICY_AWAY = 0
DEF POLICY_EVEN = 1
DEF POLICY_TRUNC = 2


cdef inline int64_t _round_sig(int64_t m53, int shift, int policy) nogil:
    cdef int64_t floor_v = m53 >> shift
    cdef int64_t rem = m53 - (floor_v << shift)
    cdef int64_t half = (<int64_t>1) << (shift - 1)
    if rem == 0 or policy == POLICY_TRUNC:
        return floor_v
    if rem > half:
        return floor_v + 1
    if rem < half:
        return floor_v
    if policy == POLICY_AWAY:
        return floor_v + 1
    return floor_v + (floor_v & 1)


cdef inline uint16_t _encode_one(double x, int E, int M, int bias,
                                 bint denorm, bint reserved, bint saturate,
                                 int policy) nogil:
    cdef uint64_t u = mx_dbl_bits(x)
    cdef int64_t s = <int64_t>(u >> 63)
    cdef int64_t exp64 = <int64_t>((u >> 52) & 0x7FF)
    cdef int64_t man = <int64_t>(u & ((<uint64_t>1 << 52) - 1))
    cdef int64_t sbit = s << (E + M)
    cdef int64_t top = ((<int64_t>1) << E) - 1
    cdef int64_t max_code, nan_code, inf_code, ovf_code
    cdef int64_t m53, n, code_mag
    cdef int64_t e, min_exp
    cdef int shift

    if reserved:
        max_code = ((top - 1) << M) | (((<int64_t>1) << M) - 1)
        inf_code = top << M
        nan_code = (top << M) | ((<int64_t>1 << (M - 1)) if M > 0 else 0)
        if M == 0:
            nan_code = inf_code
    else:
        max_code = (top << M) | (((<int64_t>1) << M) - 2)
        inf_code = 0  # unused
        nan_code = (top << M) | (((<int64_t>1) << M) - 1)

    if exp64 == 0x7FF:
        if man != 0:
            return <uint16_t>nan_code
        if reserved:
            return <uint16_t>(sbit | inf_code)
        return <uint16_t>nan_code
    if exp64 == 0:
        # zeros and float64 subnormals: below half the smallest quantum
        return <uint16_t>sbit

    m53 = man | ((<int64_t>1) << 52)
    e = exp64 - 1023
    min_exp = (1 - bias) if denorm else (-bias)

    if e >= min_exp:
        n = _round_sig(m53, 52 - M, policy)
        code_mag = n + ((e + bias - 1) << M)
    elif denorm:
        shift = <int>(min_exp - M - e + 52)
        if shift > 55:
            shift = 55
        n = _round_sig(m53, shift, policy)
        code_mag = n
    else:
        # only zero and the smallest normal live below min_exp
        if e == min_exp - 1 and man != 0:
            code_mag = (<int64_t>1) << M
        elif e == min_exp - 1 and man == 0:
            code_mag = ((<int64_t>1) << M) if policy == POLICY_AWAY else 0
        else:
            code_mag = 0
        if policy == POLICY_TRUNC:
            code_mag = 0

    if code_mag > max_code:
        if policy == POLICY_TRUNC or saturate or not reserved:
            ovf_code = max_code
        else:
            ovf_code = inf_code
        code_mag = ovf_code
    if code_mag == 0:
        return <uint16_t>sbit
    return <uint16_t>(sbit | code_mag)


def encode_f64(double[::1] values, int E, int M, bint denorm, bint reserved,
               bint saturate, int policy):
    cdef Py_ssize_t n = values.shape[0]
    out = np.empty(n, dtype=np.uint16)
    cdef uint16_t[::1] ov = out
    cdef int bias = (1 << (E - 1)) - 1
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            ov[i] = _encode_one(values[i], E, M, bias, denorm, reserved,
                                saturate, policy)
    return out


def quantize_blocks(double[:, ::1] vals, int E, int M, bint denorm,
                    bint reserved, bint saturate, int policy, int xi_max):
    """Per-row shared-scale quantization; mirrors the fallback exactly."""
    cdef Py_ssize_t rows = vals.shape[0]
    cdef Py_ssize_t bl = vals.shape[1]
    w_out = np.zeros(rows, dtype=np.int32)
    codes_out = np.empty((rows, bl), dtype=np.uint16)
    cdef int32_t[::1] wv = w_out
    cdef uint16_t[:, ::1] cv = codes_out
    cdef int bias = (1 << (E - 1)) - 1
    cdef Py_ssize_t r, i
    cdef double p, a, scaled
    cdef uint64_t u
    cdef int64_t exp64
    cdef int e2, w
    with nogil:
        for r in range(rows):
            p = 0.0
            for i in range(bl):
                a = fabs(vals[r, i])
                u = mx_dbl_bits(a)
                exp64 = <int64_t>((u >> 52) & 0x7FF)
                if 1 <= exp64 <= 0x7FE:  # normal float64
                    if a > p:
                        p = a
            if p > 0.0:
                frexp(p, &e2)
                w = e2 - 1 - xi_max
                if w > 127:
                    w = 127
                elif w < -127:
                    w = -127
            else:
                w = 0
            wv[r] = w
            for i in range(bl):
                scaled = ldexp(vals[r, i], -w)
                cv[r, i] = _encode_one(scaled, E, M, bias, denorm, reserved,
                                       saturate, policy)
    return w_out, codes_out


def block_sums_f64(double[:, ::1] a, double[:, ::1] b, int block):
    """(nb, R, S) pairwise-tree dot sums, same order as the fallback."""
    cdef Py_ssize_t R = a.shape[0]
    cdef Py_ssize_t K = a.shape[1]
    cdef Py_ssize_t S = b.shape[0]
    cdef Py_ssize_t nb = K // block
    out = np.empty((nb, R, S), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef int b2 = 1
    while b2 < block:
        b2 <<= 1
    cdef double* buf = <double*>malloc(b2 * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef Py_ssize_t j, r, s, i, m
    cdef Py_ssize_t base
    try:
        with nogil:
            for j in range(nb):
                base = j * block
                for r in range(R):
                    for s in range(S):
                        for i in range(block):
                            buf[i] = a[r, base + i] * b[s, base + i]
                        for i in range(block, b2):
                            buf[i] = 0.0
                        m = b2
                        while m > 1:
                            for i in range(m >> 1):
                                buf[i] = buf[2 * i] + buf[2 * i + 1]
                            m >>= 1
                        ov[j, r, s] = buf[0]
    finally:
        free(buf)
    return out


def block_sums_i64(int64_t[:, ::1] a, int64_t[:, ::1] b, int block):
    cdef Py_ssize_t R = a.shape[0]
    cdef Py_ssize_t K = a.shape[1]
    cdef Py_ssize_t S = b.shape[0]
    cdef Py_ssize_t nb = K // block
    out = np.empty((nb, R, S), dtype=np.int64)
    cdef int64_t[:, :, ::1] ov = out
    cdef Py_ssize_t j, r, s, i, base
    cdef int64_t acc
    with nogil:
        for j in range(nb):
            base = j * block
            for r in range(R):
                for s in range(S):
                    acc = 0
                    for i in range(block):
                        acc += a[r, base + i] * b[s, base + i]
                    ov[j, r, s] = acc
    return out


cdef inline int _bitlen64(int64_t v) nogil:
    cdef uint64_t u = <uint64_t>(v if v >= 0 else -v)
    cdef int n = 0
    while u:
        u >>= 1
        n += 1
    return n


def combine_scaled_exact(int64_t[:, :, ::1] isums, int64_t[:, :, ::1] shifts):
    """sum_j isums[j] * 2**shifts[j], exactly, one rounding per element."""
    cdef Py_ssize_t nb = isums.shape[0]
    cdef Py_ssize_t R = isums.shape[1]
    cdef Py_ssize_t S = isums.shape[2]
    out = np.empty((R, S), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, s, j
    cdef int64_t base, rel
    cdef int margin = 0
    cdef Py_ssize_t t = nb - 1
    while t > 0:
        t >>= 1
        margin += 1
    cdef mx_i128 acc
    cdef bint safe
    slow: list = []
    cdef int need, worst
    with nogil:
        for r in range(R):
            for s in range(S):
                base = shifts[0, r, s]
                for j in range(1, nb):
                    if shifts[j, r, s] < base:
                        base = shifts[j, r, s]
                worst = 0
                for j in range(nb):
                    if isums[j, r, s] != 0:
                        need = _bitlen64(isums[j, r, s]) + <int>(shifts[j, r, s] - base)
                        if need > worst:
                            worst = need
                if worst + margin <= 126:
                    acc = 0
                    for j in range(nb):
                        rel = shifts[j, r, s] - base
                        acc += (<mx_i128>isums[j, r, s]) << rel
                    ov[r, s] = ldexp(mx_i128_to_double(acc), <int>base)
                else:
                    with gil:
                        slow.append((r, s, base))
    for r, s, base in slow:
        total = 0
        for j in range(nb):
            total += int(isums[j, r, s]) << int(shifts[j, r, s] - base)
        ov[r, s] = float(np.ldexp(float(total), int(base)))
    return out
