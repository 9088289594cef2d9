"""NumPy implementation of the element-wise rounding kernels.

Same signatures and bit-identical results as the compiled ``_kernels``
module. Arrays are flat and contiguous; ``s`` holds either a single scale or
one scale per channel, cycled over the flat index.
"""

import numpy as np

BACKEND = "python"


def _scaled(x, s):
    if s.size == 1:
        return x * s[0]
    return (x.reshape(-1, s.size) * s).reshape(-1)


def _unscaled(y, s):
    if s.size == 1:
        return y / s[0]
    return (y.reshape(-1, s.size) / s).reshape(-1)


def _round_magnitude(a, mbits, emin):
    # a >= 0 and finite; exp of 0 is 0, which the clamp handles
    _, exp = np.frexp(a)
    qexp = np.maximum(exp - 1, emin) - mbits
    return np.ldexp(np.rint(np.ldexp(a, -qexp)), qexp)


def round_scaled(x, s, out, mbits, emin, max_normal, has_inf, saturate):
    y = _scaled(x, s)
    a = np.abs(y)
    finite = np.isfinite(a)
    r = _round_magnitude(np.where(finite, a, 0.0), mbits, emin)
    over = finite & (r > max_normal)
    nsat = int(np.count_nonzero(finite & (a > max_normal)))
    nunder = int(np.count_nonzero(finite & (a > 0.0) & (r == 0.0)))

    if saturate:
        r = np.where(over | np.isinf(a), max_normal, r)
    else:
        special = np.inf if has_inf else np.nan
        r = np.where(over, special, r)
        if not has_inf:
            r = np.where(np.isinf(a), np.nan, r)
        else:
            r = np.where(np.isinf(a), np.inf, r)
    r = np.where(np.isnan(a), np.nan, r)
    out[:] = _unscaled(np.copysign(r, y), s)
    return nsat, nunder


def encode(x, s, codes, ebits, mbits, bias, max_normal, has_inf, saturate, nan_code):
    y = _scaled(x, s)
    width = 1 + ebits + mbits
    emin = 1 - bias
    a = np.abs(y)
    finite = np.isfinite(a)
    r = _round_magnitude(np.where(finite, a, 0.0), mbits, emin)
    over = (finite & (r > max_normal)) | np.isinf(a)
    nsat = int(np.count_nonzero(finite & (a > max_normal)))
    nunder = int(np.count_nonzero(finite & (a > 0.0) & (r == 0.0)))

    _, exp = np.frexp(r)
    e = np.maximum(exp - 1, emin)
    n = np.ldexp(r, mbits - e).astype(np.int64)
    normal = n >= (1 << mbits)
    mag = np.where(normal, ((e + bias) << mbits) | (n - (1 << mbits)), n)

    if saturate:
        _, mexp = np.frexp(max_normal)
        me = mexp - 1
        max_code = ((me + bias) << mbits) | (int(np.ldexp(max_normal, mbits - me)) - (1 << mbits))
        mag = np.where(over, max_code, mag)
    elif has_inf:
        mag = np.where(over, ((1 << ebits) - 1) << mbits, mag)
    else:
        mag = np.where(over, nan_code, mag)

    sign = np.signbit(y).astype(np.int64) << (width - 1)
    c = sign | mag
    c = np.where(np.isnan(y), nan_code, c)
    codes[:] = c.astype(codes.dtype)
    return nsat, nunder


def decode(codes, s, out, ebits, mbits, bias, has_inf):
    c = codes.astype(np.int64)
    width = 1 + ebits + mbits
    sign = np.where(c >> (width - 1), -1.0, 1.0)
    ef = (c >> mbits) & ((1 << ebits) - 1)
    mf = c & ((1 << mbits) - 1)
    emin = 1 - bias
    sub = np.ldexp(mf.astype(np.float64), emin - mbits)
    nor = np.ldexp((mf + (1 << mbits)).astype(np.float64), ef - bias - mbits)
    v = np.where(ef == 0, sub, nor)
    top = ef == (1 << ebits) - 1
    if has_inf:
        v = np.where(top, np.where(mf == 0, np.inf, np.nan), v)
    else:
        v = np.where(top & (mf == (1 << mbits) - 1), np.nan, v)
    out[:] = _unscaled(sign * v, s)
