"""FP8/BF16 numerics emulation and a small training harness for studying FP8 training."""

from fp8train._backend import BACKEND
from fp8train.numerics import BF16, E4M3, E5M2, FP16, FormatSpec, decode, encode

__version__ = "0.1.0"

__all__ = ["BACKEND", "BF16", "E4M3", "E5M2", "FP16", "FormatSpec", "decode", "encode"]
