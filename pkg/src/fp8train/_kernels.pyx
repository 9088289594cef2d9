# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element-wise rounding kernels.

Mirrors ``_kernels_py`` exactly: every element goes through one
frexp/ldexp/rint sequence in double precision, so the two backends are
bit-identical. ``rint`` relies on the default round-to-nearest-even mode.
"""

from libc.math cimport frexp, ldexp, rint, fabs, copysign, isnan, isinf, NAN, INFINITY
from libc.stdint cimport uint16_t, int64_t

BACKEND = "cython"


cdef inline double _round_mag(double a, int mbits, int emin) nogil:
    cdef int exp
    cdef int qexp
    frexp(a, &exp)
    qexp = exp - 1
    if qexp < emin:
        qexp = emin
    qexp -= mbits
    return ldexp(rint(ldexp(a, -qexp)), qexp)


def round_scaled(const double[::1] x, const double[::1] s, double[::1] out,
                 int mbits, int emin, double max_normal, bint has_inf, bint saturate):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t ns = s.shape[0]
    cdef Py_ssize_t i
    cdef double y, a, r, sc
    cdef int64_t nsat = 0
    cdef int64_t nunder = 0
    with nogil:
        for i in range(n):
            sc = s[0] if ns == 1 else s[i % ns]
            y = x[i] * sc
            a = fabs(y)
            if isnan(a):
                out[i] = NAN
                continue
            if isinf(a):
                if saturate:
                    r = max_normal
                elif has_inf:
                    r = INFINITY
                else:
                    r = NAN
            else:
                r = _round_mag(a, mbits, emin)
                if a > max_normal:
                    nsat += 1
                if r > max_normal:
                    if saturate:
                        r = max_normal
                    elif has_inf:
                        r = INFINITY
                    else:
                        r = NAN
                elif r == 0.0 and a > 0.0:
                    nunder += 1
            out[i] = copysign(r, y) / sc
    return nsat, nunder


def encode(const double[::1] x, const double[::1] s, uint16_t[::1] codes,
           int ebits, int mbits, int bias, double max_normal, bint has_inf,
           bint saturate, int nan_code):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t ns = s.shape[0]
    cdef Py_ssize_t i
    cdef int width = 1 + ebits + mbits
    cdef int emin = 1 - bias
    cdef int exp, e, over, mexp
    cdef int64_t m, mag, max_code
    cdef double y, a, r
    cdef int64_t nsat = 0
    cdef int64_t nunder = 0
    frexp(max_normal, &mexp)
    max_code = ((mexp - 1 + bias) << mbits) | (<int64_t>ldexp(max_normal, mbits - mexp + 1) - (1 << mbits))
    with nogil:
        for i in range(n):
            y = x[i] * (s[0] if ns == 1 else s[i % ns])
            if isnan(y):
                codes[i] = nan_code
                continue
            a = fabs(y)
            over = 0
            r = 0.0
            if isinf(a):
                over = 1
            else:
                r = _round_mag(a, mbits, emin)
                if a > max_normal:
                    nsat += 1
                if r > max_normal:
                    over = 1
                elif r == 0.0 and a > 0.0:
                    nunder += 1
            if over:
                if saturate:
                    mag = max_code
                elif has_inf:
                    mag = ((1 << ebits) - 1) << mbits
                else:
                    mag = nan_code
            else:
                frexp(r, &exp)
                e = exp - 1
                if e < emin:
                    e = emin
                m = <int64_t>ldexp(r, mbits - e)
                if m >= (1 << mbits):
                    mag = ((e + bias) << mbits) | (m - (1 << mbits))
                else:
                    mag = m
            if copysign(1.0, y) < 0:
                mag |= (1 << (width - 1))
            codes[i] = <uint16_t>mag
    return nsat, nunder


def decode(const uint16_t[::1] codes, const double[::1] s, double[::1] out,
           int ebits, int mbits, int bias, bint has_inf):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t ns = s.shape[0]
    cdef Py_ssize_t i
    cdef int width = 1 + ebits + mbits
    cdef int emin = 1 - bias
    cdef int c, ef, mf, top = (1 << ebits) - 1
    cdef double v
    with nogil:
        for i in range(n):
            c = codes[i]
            ef = (c >> mbits) & top
            mf = c & ((1 << mbits) - 1)
            if ef == top and has_inf:
                v = INFINITY if mf == 0 else NAN
            elif ef == top and mf == (1 << mbits) - 1:
                v = NAN
            elif ef == 0:
                v = ldexp(<double>mf, emin - mbits)
            else:
                v = ldexp(<double>(mf + (1 << mbits)), ef - bias - mbits)
            if (c >> (width - 1)) & 1:
                v = -v
            out[i] = v / (s[0] if ns == 1 else s[i % ns])
