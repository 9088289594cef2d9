"""Adam with low-precision moment storage.

Moments are kept as codes in their storage format (E4M3, E5M2, FP16 or
FP32) with one just-in-time scale per tensor, re-derived after every update.
Each step dequantizes the stored moments, applies the usual exponential
averages in float64, and stores them again. Bias correction comes from the
step counter in float64 and is never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fp8train.numerics import FP16, FormatSpec, get_format, round_array
from fp8train.scaling import ScaledTensor, amax, quantize, scale_from_amax

MOMENT_FORMATS = ("FP32", "FP16", "E4M3", "E5M2")
MASTER_FORMATS = ("FP32", "FP16")
BYTES = {"FP32": 4, "FP16": 2, "BF16": 2, "E4M3": 1, "E5M2": 1}


class DivergenceError(FloatingPointError):
    """Raised when a gradient handed to the optimizer is not finite."""


@dataclass
class MomentStats:
    saturated: int = 0
    underflowed: int = 0


@dataclass
class StoredMoment:
    """One moment tensor in its storage format."""

    format: str
    data: np.ndarray | ScaledTensor

    def value(self) -> np.ndarray:
        if isinstance(self.data, ScaledTensor):
            return self.data.dequantize()
        return self.data


def moment_quantize(moment: np.ndarray, fmt: FormatSpec | str) -> ScaledTensor:
    """Just-in-time per-tensor scale and saturating encode.

    The scale maps the tensor amax onto ``max_normal``; the returned tensor
    carries the number of saturated elements and of nonzero elements that
    flushed to zero.
    """
    fmt = get_format(fmt)
    moment = np.asarray(moment, dtype=np.float64)
    a = amax(moment)
    scale = scale_from_amax(a, fmt, 1.0)
    if not math.isfinite(scale) or scale <= 0:
        scale = 1.0
    return quantize(moment, scale, fmt)


def store_moment(values: np.ndarray, fmt: str, round_fp32: bool = False) -> tuple[StoredMoment, MomentStats]:
    if fmt == "FP32":
        if not round_fp32:
            return StoredMoment(fmt, values), MomentStats()
        stored = values.astype(np.float32).astype(np.float64)
        under = int(np.count_nonzero((values != 0) & (stored == 0)))
        return StoredMoment(fmt, stored), MomentStats(0, under)
    if fmt == "FP16":
        r = round_array(values, FP16)
        return StoredMoment(fmt, r.values), MomentStats(r.saturated, r.underflowed)
    q = moment_quantize(values, fmt)
    return StoredMoment(fmt, q), MomentStats(q.saturated, q.underflowed)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m_format: str = "FP32"
    v_format: str = "FP32"
    master_format: str = "FP32"
    weight_decay: float = 0.0  # decoupled (AdamW-style); coupled L2 goes through the loss
    # FP32 is the wide-precision baseline; set to emulate float32 rounding of it
    round_fp32: bool = False

    def __post_init__(self):
        for name in ("m_format", "v_format"):
            val = getattr(self, name).upper()
            if val not in MOMENT_FORMATS:
                raise ValueError(f"{name} must be one of {MOMENT_FORMATS}, got {val!r}")
            setattr(self, name, val)
        self.master_format = self.master_format.upper()
        if self.master_format not in MASTER_FORMATS:
            raise ValueError(f"master_format must be one of {MASTER_FORMATS}")


@dataclass
class Fp8AdamState:
    """Per-parameter moments plus the shared step counter."""

    m: dict[str, StoredMoment] = field(default_factory=dict)
    v: dict[str, StoredMoment] = field(default_factory=dict)
    step: int = 0
    m_stats: dict[str, MomentStats] = field(default_factory=dict)
    v_stats: dict[str, MomentStats] = field(default_factory=dict)

    def m_scale(self, name: str) -> float:
        d = self.m[name].data
        return float(d.scale) if isinstance(d, ScaledTensor) else 1.0

    def v_scale(self, name: str) -> float:
        d = self.v[name].data
        return float(d.scale) if isinstance(d, ScaledTensor) else 1.0

    def v_underflow_total(self) -> int:
        return sum(s.underflowed for s in self.v_stats.values())


def store_master(p: np.ndarray, fmt: str, round_fp32: bool = False) -> np.ndarray:
    if fmt == "FP32":
        return p.astype(np.float32).astype(np.float64) if round_fp32 else p
    return round_array(p, FP16).values


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: Fp8AdamState,
    config: AdamConfig,
    lr: float | None = None,
) -> Fp8AdamState:
    """One Adam update of ``params`` in place.

    ``m = b1 m + (1 - b1) g``, ``v = b2 v + (1 - b2) g^2`` from the dequantized
    stored moments; ``p -= lr * m_hat / (sqrt(v_hat) + eps)``; then the moments
    are re-stored in their formats and the master weights rounded to theirs.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    lr = config.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name in state.m:
            m_prev = state.m[name].value()
            v_prev = state.v[name].value()
        else:
            m_prev = np.zeros_like(p)
            v_prev = np.zeros_like(p)
        m = config.beta1 * m_prev + (1.0 - config.beta1) * g
        v = config.beta2 * v_prev + (1.0 - config.beta2) * (g * g)
        state.m[name], state.m_stats[name] = store_moment(m, config.m_format, config.round_fp32)
        state.v[name], state.v_stats[name] = store_moment(v, config.v_format, config.round_fp32)
        # the update uses the stored (rounded) moments, as the next step will
        m_hat = state.m[name].value() / bc1
        v_hat = state.v[name].value() / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + config.eps)
        if config.weight_decay:
            update = update + lr * config.weight_decay * p
        p -= update
        if config.master_format != "FP32" or config.round_fp32:
            p[...] = store_master(p, config.master_format, config.round_fp32)
    return state


def memory_report(n_params: int, config: AdamConfig | None = None, *,
                  master: str | None = None, m: str | None = None, v: str | None = None,
                  n_tensors: int = 1) -> dict[str, float]:
    """Bytes of optimizer-related state: master weights and both moments.

    Per-tensor scales of FP8 moments are counted as one FP32 each.
    """
    config = config or AdamConfig()
    master = (master or config.master_format).upper()
    m = (m or config.m_format).upper()
    v = (v or config.v_format).upper()
    out = {
        "master": n_params * BYTES[master],
        "m": n_params * BYTES[m],
        "v": n_params * BYTES[v],
    }
    out["scales"] = 4 * n_tensors * (int(m in ("E4M3", "E5M2")) + int(v in ("E4M3", "E5M2")))
    out["total"] = out["master"] + out["m"] + out["v"] + out["scales"]
    out["bytes_per_param"] = (out["master"] + out["m"] + out["v"]) / n_params if n_params else 0.0
    return out
