"""Bit-exact software emulation of E4M3, E5M2, BF16 and FP16.

Scalar ``encode``/``decode`` work on Python floats and integer codes. The
array helpers (``round_array``, ``encode_array``, ``decode_array``) dispatch to
the compiled kernel when it is available, otherwise to the NumPy fallback;
both produce identical bits.

All arithmetic is carried out in float64. Every value of the four formats is
exactly representable there, and scaling by a power of two is exact, so the
emulation never introduces a second rounding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from fp8train import _backend

__all__ = [
    "FormatSpec",
    "CodePoint",
    "NanPolicy",
    "E4M3",
    "E5M2",
    "BF16",
    "FP16",
    "FORMATS",
    "get_format",
    "encode",
    "decode",
    "enumerate_values",
    "round_value",
    "round_array",
    "encode_array",
    "decode_array",
    "ulp",
    "RoundResult",
]


class NanPolicy(str, enum.Enum):
    # all-ones exponent reserved: mantissa 0 is +-inf, anything else NaN
    IEEE = "ieee"
    # no infinities; only the all-ones exponent + all-ones mantissa is NaN
    FINITE = "finite"


@dataclass(frozen=True)
class FormatSpec:
    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    nan_policy: NanPolicy
    max_normal: float = field(init=False)
    min_normal: float = field(init=False)
    min_subnormal: float = field(init=False)

    def __post_init__(self):
        e, m = self.exponent_bits, self.mantissa_bits
        if self.nan_policy is NanPolicy.IEEE:
            top_exp = (1 << e) - 2
            top_man = (1 << m) - 1
        else:
            top_exp = (1 << e) - 1
            top_man = (1 << m) - 2
        object.__setattr__(
            self, "max_normal", math.ldexp((1 << m) + top_man, top_exp - self.bias - m)
        )
        object.__setattr__(self, "min_normal", math.ldexp(1.0, 1 - self.bias))
        object.__setattr__(self, "min_subnormal", math.ldexp(1.0, 1 - self.bias - m))

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def has_infinity(self) -> bool:
        return self.nan_policy is NanPolicy.IEEE

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal binade."""
        return 1 - self.bias

    @property
    def max_normal_exponent(self) -> int:
        """Unbiased exponent of the largest finite binade."""
        return math.frexp(self.max_normal)[1] - 1

    @property
    def code_dtype(self):
        return np.uint8 if self.width == 8 else np.uint16

    @property
    def nan_code(self) -> int:
        if self.nan_policy is NanPolicy.FINITE:
            return (1 << (self.width - 1)) - 1
        # canonical quiet NaN: exponent all ones, top mantissa bit set
        exp_all = ((1 << self.exponent_bits) - 1) << self.mantissa_bits
        return exp_all | (1 << (self.mantissa_bits - 1))

    @property
    def max_code(self) -> int:
        """Positive code of ``max_normal``."""
        return encode(self.max_normal, self)

    def __str__(self) -> str:
        return self.name


E4M3 = FormatSpec("E4M3", 4, 3, 7, NanPolicy.FINITE)
E5M2 = FormatSpec("E5M2", 5, 2, 15, NanPolicy.IEEE)
BF16 = FormatSpec("BF16", 8, 7, 127, NanPolicy.IEEE)
FP16 = FormatSpec("FP16", 5, 10, 15, NanPolicy.IEEE)

FORMATS = {f.name: f for f in (E4M3, E5M2, BF16, FP16)}


def get_format(name: str | FormatSpec) -> FormatSpec:
    if isinstance(name, FormatSpec):
        return name
    try:
        return FORMATS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown format {name!r}; expected one of {sorted(FORMATS)}") from None


@dataclass(frozen=True)
class CodePoint:
    bits: int
    format: FormatSpec

    def __post_init__(self):
        if not 0 <= self.bits < (1 << self.format.width):
            raise ValueError(f"code {self.bits:#x} does not fit {self.format.name}")

    @property
    def sign(self) -> int:
        return self.bits >> (self.format.width - 1)

    @property
    def exponent_field(self) -> int:
        return (self.bits >> self.format.mantissa_bits) & ((1 << self.format.exponent_bits) - 1)

    @property
    def mantissa_field(self) -> int:
        return self.bits & ((1 << self.format.mantissa_bits) - 1)

    @property
    def value(self) -> float:
        return decode(self)

    def __int__(self) -> int:
        return self.bits


def _check_overflow_mode(overflow: str) -> bool:
    if overflow == "saturate":
        return True
    if overflow == "to_special":
        return False
    raise ValueError(f"overflow must be 'saturate' or 'to_special', got {overflow!r}")


def _overflow_code(sign: int, fmt: FormatSpec, saturate: bool) -> int:
    sign_bit = sign << (fmt.width - 1)
    if saturate:
        return sign_bit | fmt.max_code
    if fmt.has_infinity:
        return sign_bit | (((1 << fmt.exponent_bits) - 1) << fmt.mantissa_bits)
    return sign_bit | fmt.nan_code


def encode(
    value: float,
    fmt: FormatSpec,
    rounding: str = "nearest_even",
    overflow: str = "saturate",
) -> int:
    """Round ``value`` to ``fmt`` and return its integer code.

    Ties go to the even mantissa. Magnitudes that round above ``max_normal``
    become ``max_normal`` when ``overflow="saturate"``, otherwise infinity
    (or NaN for formats without infinity). NaN always maps to the canonical
    NaN code.
    """
    if rounding != "nearest_even":
        raise ValueError("only round-to-nearest-even is supported")
    saturate = _check_overflow_mode(overflow)
    value = float(value)
    m = fmt.mantissa_bits
    if math.isnan(value):
        return fmt.nan_code
    sign = 1 if math.copysign(1.0, value) < 0 else 0
    sign_bit = sign << (fmt.width - 1)
    a = abs(value)
    if a == 0.0:
        return sign_bit
    if math.isinf(a):
        return _overflow_code(sign, fmt, saturate)

    _, exp = math.frexp(a)
    e = max(exp - 1, fmt.min_exponent)
    quantum = math.ldexp(1.0, e - m)
    # a / quantum is exact (power-of-two divisor); round() is half-to-even
    n = round(a / quantum)
    if e > fmt.max_normal_exponent or (
        e == fmt.max_normal_exponent and math.ldexp(n, e - m) > fmt.max_normal
    ):
        return _overflow_code(sign, fmt, saturate)
    if n == 0:
        return sign_bit
    if n >= (2 << m):  # rounding carried into the next binade
        n >>= 1
        e += 1
    if n < (1 << m):
        return sign_bit | n  # subnormal, exponent field 0
    return sign_bit | ((e + fmt.bias) << m) | (n - (1 << m))


def decode(code: int | CodePoint, fmt: FormatSpec | None = None) -> float:
    """Exact value of a code. Accepts a ``CodePoint`` or ``(bits, fmt)``."""
    if isinstance(code, CodePoint):
        fmt = code.format
        bits = code.bits
    else:
        if fmt is None:
            raise TypeError("decode(bits) needs a format")
        bits = int(code)
        if not 0 <= bits < (1 << fmt.width):
            raise ValueError(f"code {bits:#x} does not fit {fmt.name}")
    e, m = fmt.exponent_bits, fmt.mantissa_bits
    sign = -1.0 if bits >> (e + m) else 1.0
    ef = (bits >> m) & ((1 << e) - 1)
    mf = bits & ((1 << m) - 1)
    exp_all = (1 << e) - 1
    if ef == exp_all:
        if fmt.has_infinity:
            return sign * math.inf if mf == 0 else math.nan
        if mf == (1 << m) - 1:
            return math.nan
    if ef == 0:
        return sign * math.ldexp(mf, fmt.min_exponent - m)
    return sign * math.ldexp((1 << m) + mf, ef - fmt.bias - m)


def round_value(value: float, fmt: FormatSpec, overflow: str = "saturate") -> float:
    """decode(encode(value)) as a float."""
    return decode(encode(value, fmt, overflow=overflow), fmt)


def ulp(value: float, fmt: FormatSpec) -> float:
    """Spacing of the ``fmt`` grid in the binade containing ``|value|``."""
    a = abs(float(value))
    if a == 0.0 or not math.isfinite(a):
        return fmt.min_subnormal
    e = max(math.frexp(a)[1] - 1, fmt.min_exponent)
    return math.ldexp(1.0, e - fmt.mantissa_bits)


class TableEntry(NamedTuple):
    code: CodePoint
    value: float


def enumerate_values(fmt: FormatSpec) -> list[TableEntry]:
    """Every code of ``fmt`` with its decoded value.

    Finite values come first, sorted ascending (-0 before +0), followed by
    the specials (infinities, then NaNs) in code order. The list always has
    ``2**width`` entries.
    """
    finite, special = [], []
    for bits in range(1 << fmt.width):
        v = decode(bits, fmt)
        entry = TableEntry(CodePoint(bits, fmt), v)
        (finite if math.isfinite(v) else special).append(entry)
    finite.sort(key=lambda t: (t.value, math.copysign(1.0, t.value)))
    special.sort(key=lambda t: (math.isnan(t.value), t.value if not math.isnan(t.value) else 0, t.code.bits))
    return finite + special


def iter_code_rows(fmt: FormatSpec) -> Iterator[tuple[str, int, int, int, float]]:
    """(bits_hex, sign, exponent_field, mantissa_field, value) in code order."""
    digits = fmt.width // 4
    for bits in range(1 << fmt.width):
        c = CodePoint(bits, fmt)
        yield f"0x{bits:0{digits}X}", c.sign, c.exponent_field, c.mantissa_field, decode(c)


# ---------------------------------------------------------------- arrays


class RoundResult(NamedTuple):
    values: np.ndarray
    saturated: int
    underflowed: int


def _kernel_args(fmt: FormatSpec) -> tuple[int, int, float, bool]:
    return fmt.mantissa_bits, fmt.min_exponent, fmt.max_normal, fmt.has_infinity


def _as_scale(scale, x: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(np.asarray(scale, dtype=np.float64).reshape(-1))
    if s.size != 1 and (x.ndim == 0 or s.size != x.shape[-1]):
        raise ValueError(f"scale of length {s.size} does not match last axis of shape {x.shape}")
    return s


def round_array(
    x,
    fmt: FormatSpec,
    scale=1.0,
    overflow: str = "saturate",
) -> RoundResult:
    """Quantize-dequantize an array: ``decode(encode(scale * x)) / scale``.

    ``scale`` is a scalar or a vector broadcast along the last axis (one
    factor per channel). Returns the dequantized values together with the
    number of saturated elements (finite ``|scale * x| > max_normal``) and
    the number of nonzero finite elements that rounded to zero.
    """
    saturate = _check_overflow_mode(overflow)
    x = np.ascontiguousarray(x, dtype=np.float64)
    s = _as_scale(scale, x)
    out = np.empty_like(x)
    nsat, nunder = _backend.kernels.round_scaled(
        x.reshape(-1), s, out.reshape(-1), *_kernel_args(fmt), saturate
    )
    return RoundResult(out, int(nsat), int(nunder))


def encode_array(x, fmt: FormatSpec, scale=1.0, overflow: str = "saturate",
                 return_counts: bool = False):
    """Codes of ``scale * x`` as uint8 (FP8) or uint16 (BF16/FP16).

    With ``return_counts`` the result is ``(codes, saturated, underflowed)``
    counted as in ``round_array``.
    """
    saturate = _check_overflow_mode(overflow)
    x = np.ascontiguousarray(x, dtype=np.float64)
    s = _as_scale(scale, x)
    codes = np.empty(x.shape, dtype=np.uint16)
    nsat, nunder = _backend.kernels.encode(
        x.reshape(-1),
        s,
        codes.reshape(-1),
        fmt.exponent_bits,
        fmt.mantissa_bits,
        fmt.bias,
        fmt.max_normal,
        fmt.has_infinity,
        saturate,
        fmt.nan_code,
    )
    codes = codes.astype(fmt.code_dtype)
    if return_counts:
        return codes, int(nsat), int(nunder)
    return codes


def decode_array(codes, fmt: FormatSpec, scale=1.0) -> np.ndarray:
    """Exact values of ``codes`` divided by ``scale``."""
    c = np.ascontiguousarray(codes, dtype=np.uint16)
    if c.size and int(c.max()) >= (1 << fmt.width):
        raise ValueError(f"codes do not fit {fmt.name}")
    s = _as_scale(scale, c)
    out = np.empty(c.shape, dtype=np.float64)
    _backend.kernels.decode(
        c.reshape(-1), s, out.reshape(-1), fmt.exponent_bits, fmt.mantissa_bits, fmt.bias, fmt.has_infinity
    )
    return out
