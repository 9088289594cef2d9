"""Scale selection for FP8 quantization.

Convention: a tensor ``t`` is quantized as ``encode(scale * t)`` and
dequantized as ``decode(codes) / scale``. Three ways of choosing ``scale``
are provided: delayed (from an amax history of earlier iterations),
just-in-time (from the tensor itself), and per-channel (one factor per
column of a ``[tokens x channels]`` tensor).
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fp8train.numerics import FormatSpec, decode_array, encode_array, round_array

DEFAULT_HISTORY = 16
DEFAULT_MARGIN = 1.0


class ScalingError(ValueError):
    pass


@dataclass
class AmaxHistory:
    """Rolling window of per-iteration amax values."""

    capacity: int = DEFAULT_HISTORY
    reduction: str = "max"
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ScalingError("history capacity must be >= 1")
        if self.reduction not in ("max", "most_recent"):
            raise ScalingError(f"unknown reduction {self.reduction!r}")
        self.window = deque(self.window, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.window)

    @property
    def values(self) -> list[float]:
        return list(self.window)

    def effective_amax(self) -> float:
        if not self.window:
            raise ScalingError("amax history is empty; seed it with a just-in-time pass")
        if self.reduction == "max":
            return max(self.window)
        return self.window[-1]


def update_history(h: AmaxHistory, observed_amax: float) -> AmaxHistory:
    """Append one iteration's amax, evicting the oldest entry when full."""
    a = float(observed_amax)
    if not math.isfinite(a) or a < 0:
        raise ScalingError(f"amax must be finite and >= 0, got {observed_amax!r}")
    h.window.append(a)
    return h


def scale_from_amax(amax: float, fmt: FormatSpec, margin: float) -> float:
    if not 0 < margin <= 1:
        raise ScalingError(f"margin must be in (0, 1], got {margin}")
    if amax == 0:
        return 1.0
    target = margin * fmt.max_normal
    s = target / amax
    # division can round up by an ulp, pushing ``s * amax`` past the target
    while s * amax > target:
        s = math.nextafter(s, 0.0)
    return s


def delayed_scale(h: AmaxHistory, fmt: FormatSpec, margin: float = DEFAULT_MARGIN) -> float:
    return scale_from_amax(h.effective_amax(), fmt, margin)


def amax(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return 0.0
    return float(np.max(np.abs(t)))


def _check_finite(t: np.ndarray) -> None:
    if not np.all(np.isfinite(t)):
        raise ScalingError("tensor contains non-finite values")


def jit_scale(t, fmt: FormatSpec, margin: float = DEFAULT_MARGIN) -> float:
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    return scale_from_amax(amax(t), fmt, margin)


@dataclass(frozen=True)
class ChannelScales:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ScalingError("channel scales must be a non-empty vector")
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ScalingError("channel scales must be positive and finite")
        object.__setattr__(self, "s", s)

    def __len__(self) -> int:
        return self.s.size


def channel_amax(t: np.ndarray, workers: int = 1) -> np.ndarray:
    """Max |t[:, i]| for every channel ``i``.

    Channels are split into contiguous chunks handled independently. ``max``
    is exact, so the result is the same for any ``workers``.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ScalingError(f"expected a [tokens x channels] tensor, got shape {t.shape}")
    if t.shape[0] == 0:
        return np.zeros(t.shape[1])
    if workers <= 1 or t.shape[1] < 2 * workers:
        return np.max(np.abs(t), axis=0)
    bounds = np.linspace(0, t.shape[1], workers + 1).astype(int)
    chunks = [(bounds[k], bounds[k + 1]) for k in range(workers)]
    out = np.empty(t.shape[1])

    def run(lo_hi):
        lo, hi = lo_hi
        out[lo:hi] = np.max(np.abs(t[:, lo:hi]), axis=0)

    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(run, chunks))
    return out


def per_channel_scales(
    t, fmt: FormatSpec, margin: float = DEFAULT_MARGIN, workers: int = 1,
    clamp: tuple[float, float] | None = None,
) -> ChannelScales:
    """One scale per column so each channel's max maps to ``margin * max_normal``."""
    t = np.asarray(t, dtype=np.float64)
    _check_finite(t)
    if not 0 < margin <= 1:
        raise ScalingError(f"margin must be in (0, 1], got {margin}")
    cmax = channel_amax(t, workers)
    target = margin * fmt.max_normal
    safe = np.where(cmax > 0, cmax, 1.0)
    with np.errstate(over="ignore"):
        # subnormal channel maxima overflow to inf; the loop below backs off
        s = np.where(cmax > 0, target / safe, 1.0)
    over = (cmax > 0) & (s * safe > target)
    while np.any(over):
        s = np.where(over, np.nextafter(s, 0.0), s)
        over = (cmax > 0) & (s * safe > target)
    if clamp is not None:
        s = np.clip(s, *clamp)
    return ChannelScales(s)


@dataclass
class ScaledTensor:
    codes: np.ndarray
    scale: float | np.ndarray
    format: FormatSpec
    saturated: int = 0
    underflowed: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return decode_array(self.codes, self.format, self.scale)

    @property
    def nbytes(self) -> int:
        return self.codes.size * (self.format.width // 8) + np.size(self.scale) * 4


def _scale_vector(scale) -> float | np.ndarray:
    if isinstance(scale, ChannelScales):
        return scale.s
    s = float(scale)
    if not (math.isfinite(s) and s > 0):
        raise ScalingError(f"scale must be positive and finite, got {scale!r}")
    return s


def quantize(t, scale, fmt: FormatSpec) -> ScaledTensor:
    """Saturating encode of ``scale * t``; a ``ChannelScales`` applies per column."""
    t = np.asarray(t, dtype=np.float64)
    s = _scale_vector(scale)
    codes, nsat, nunder = encode_array(t, fmt, s, return_counts=True)
    return ScaledTensor(codes, s, fmt, nsat, nunder)


def dequantize(q: ScaledTensor) -> np.ndarray:
    return q.dequantize()


def fake_quantize(t, scale, fmt: FormatSpec):
    """``dequantize(quantize(t, scale))`` without materializing codes."""
    return round_array(t, fmt, _scale_vector(scale))
