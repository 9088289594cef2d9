"""Compare the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both backends are loaded side by side, checked for bit-identical output on
the benchmark input, then timed on quantize-dequantize, encode and decode.
"""

import argparse
import timeit

import numpy as np

from fp8train import _backend
from fp8train.numerics import BF16, E4M3, E5M2


def _cases(fmt, x, s):
    n = x.size
    out = np.empty(n)
    codes = np.empty(n, dtype=np.uint16)
    rs = (fmt.mantissa_bits, fmt.min_exponent, fmt.max_normal, fmt.has_infinity, True)
    enc = (fmt.exponent_bits, fmt.mantissa_bits, fmt.bias, fmt.max_normal, fmt.has_infinity, True,
           fmt.nan_code)
    dec = (fmt.exponent_bits, fmt.mantissa_bits, fmt.bias, fmt.has_infinity)
    return {
        "round_scaled": lambda k: k.round_scaled(x, s, out, *rs),
        "encode": lambda k: k.encode(x, s, codes, *enc),
        "decode": lambda k: k.decode(codes, s, out, *dec),
    }, out, codes


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    try:
        fast = _backend.load("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    slow = _backend.load("python")

    rng = np.random.default_rng(0)
    x = rng.standard_normal(args.n) * np.exp(rng.uniform(-12, 12, args.n))
    s = np.array([1.0])

    print(f"{'format':6} {'kernel':13} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for fmt in (E4M3, E5M2, BF16):
        cases, out, codes = _cases(fmt, x, s)
        for name, fn in cases.items():
            fn(slow)
            ref = (out.copy(), codes.copy())
            fn(fast)
            if not (np.array_equal(ref[0], out, equal_nan=True) and np.array_equal(ref[1], codes)):
                raise SystemExit(f"backends disagree on {fmt.name} {name}")
            t_py = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat))
            t_cy = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat))
            print(f"{fmt.name:6} {name:13} {1e3 * t_py:10.2f} {1e3 * t_cy:10.2f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
