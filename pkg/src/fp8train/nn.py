"""Dense-tensor training core with emulated low-precision matmul inputs.

Tensors are float64 NumPy arrays laid out ``[tokens x features]``. Every
matmul accumulates in float64; quantization only touches matmul inputs
(fake-quantize: encode, then decode), and master weights are never modified
by it. Backward passes treat quantizers as identity (straight-through).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_softmax, softmax

from fp8train.numerics import BF16, E4M3, E5M2, FormatSpec, round_array
from fp8train.scaling import (
    DEFAULT_HISTORY,
    DEFAULT_MARGIN,
    AmaxHistory,
    ChannelScales,
    amax,
    delayed_scale,
    per_channel_scales,
    scale_from_amax,
    update_history,
)

# ------------------------------------------------------------ quantizers

PRECISIONS = ("none", "bf16_baseline", "fp8_full", "fp8_swiglu_out_bf16", "fp8_smooth_swiglu")
ROLES = ("act", "weight", "grad")

_FP8 = {"act": (E4M3, "delayed"), "weight": (E4M3, "delayed"), "grad": (E5M2, "delayed")}
_BF16 = (BF16, "cast")

POLICY_TABLE: dict[str, dict[str, tuple[FormatSpec, str]]] = {
    "none": {},
    "bf16_baseline": {r: _BF16 for r in ROLES},
    "fp8_full": _FP8,
    "fp8_swiglu_out_bf16": _FP8,
    "fp8_smooth_swiglu": _FP8,
}
# how each precision treats the SwiGLU output (the input of w3)
BLOCK_MODE = {
    "none": "swiglu",
    "bf16_baseline": "swiglu",
    "fp8_full": "swiglu",
    "fp8_swiglu_out_bf16": "swiglu_out_bf16",
    "fp8_smooth_swiglu": "smooth_swiglu",
}


@dataclass
class TensorStats:
    """What one quantizer saw on the current iteration."""

    amax_pre: float = 0.0
    amax_post: float = 0.0
    scale: float = 1.0
    saturated: int = 0
    underflowed: int = 0
    nonfinite: bool = False


class DelayedScaler:
    """Per-tensor delayed scaling: the scale comes from earlier iterations' amax.

    The first call has no history, so it seeds one with the current tensor
    (a just-in-time pass). The current amax is appended after quantizing.
    """

    def __init__(self, history_len: int = DEFAULT_HISTORY, margin: float = DEFAULT_MARGIN,
                 reduction: str = "max"):
        self.history = AmaxHistory(history_len, reduction)
        self.margin = margin

    def fake_quantize(self, t: np.ndarray, fmt: FormatSpec) -> tuple[np.ndarray, TensorStats]:
        a = amax(t)
        finite = math.isfinite(a)
        if not len(self.history):
            update_history(self.history, a if finite else 0.0)
        scale = delayed_scale(self.history, fmt, self.margin)
        r = round_array(t, fmt, scale)
        if finite:
            update_history(self.history, a)
        return r.values, TensorStats(a, amax(r.values), scale, r.saturated, r.underflowed, not finite)


def fake_quantize(t: np.ndarray, fmt: FormatSpec, source=None, margin: float = DEFAULT_MARGIN):
    """Quantize-dequantize ``t`` with a scale taken from ``source``.

    ``source`` is a ``DelayedScaler``, a fixed positive float, or ``None`` for
    a just-in-time scale from ``t`` itself. Returns ``(values, TensorStats)``.
    """
    if isinstance(source, DelayedScaler):
        return source.fake_quantize(t, fmt)
    a = amax(t)
    if source is None:
        scale = scale_from_amax(a, fmt, margin) if math.isfinite(a) else 1.0
    else:
        scale = float(source)
        if not (scale > 0 and math.isfinite(scale)):
            raise ValueError(f"scale must be positive and finite, got {source!r}")
    r = round_array(t, fmt, scale)
    return r.values, TensorStats(a, amax(r.values), scale, r.saturated, r.underflowed, not math.isfinite(a))


class QuantContext:
    """Quantization state for one model: policy, delayed-scaling histories, stats.

    ``precision`` picks a row of ``POLICY_TABLE``. ``enabled=False`` turns every
    quantizer (and the per-channel rescaling) into an exact no-op.
    """

    def __init__(
        self,
        precision: str = "none",
        history_len: int = DEFAULT_HISTORY,
        margin: float = DEFAULT_MARGIN,
        reduction: str = "max",
        channel_margin: float = DEFAULT_MARGIN,
        scale_refresh: int = 1,
        workers: int = 1,
        enabled: bool = True,
        channel_clamp: tuple[float, float] = (2.0**-30, 2.0**30),
    ):
        if precision not in POLICY_TABLE:
            raise ValueError(f"unknown precision {precision!r}; expected one of {PRECISIONS}")
        if scale_refresh < 1:
            raise ValueError("scale_refresh must be >= 1")
        self.precision = precision
        self.policy = POLICY_TABLE[precision]
        self.history_len = history_len
        self.margin = margin
        self.reduction = reduction
        self.channel_margin = channel_margin
        self.scale_refresh = scale_refresh
        self.workers = workers
        self.enabled = enabled
        self.channel_clamp = channel_clamp
        self.iteration = 0
        self.scalers: dict[str, DelayedScaler] = {}
        self.stats: dict[str, TensorStats] = {}
        self.channel_amax: dict[str, np.ndarray] = {}
        self._channel_scales: dict[str, tuple[int, ChannelScales]] = {}
        self.hooks: dict[str, Callable[[np.ndarray, int], np.ndarray]] = {}

    def begin_step(self, iteration: int) -> None:
        self.iteration = iteration
        self.stats = {}
        self.channel_amax = {}

    def format_for(self, role: str) -> FormatSpec | None:
        entry = self.policy.get(role)
        return entry[0] if entry and self.enabled else None

    def scaler(self, tag: str) -> DelayedScaler:
        if tag not in self.scalers:
            self.scalers[tag] = DelayedScaler(self.history_len, self.margin, self.reduction)
        return self.scalers[tag]

    def hook(self, tag: str, t: np.ndarray) -> np.ndarray:
        fn = self.hooks.get(tag)
        return t if fn is None else fn(t, self.iteration)

    def q(self, tag: str, role: str, t: np.ndarray) -> np.ndarray:
        """Fake-quantize ``t`` according to the policy for ``role``."""
        entry = self.policy.get(role)
        if entry is None or not self.enabled:
            return t
        fmt, how = entry
        if how == "cast":
            r = round_array(t, fmt)
            a = amax(t)
            self.stats[tag] = TensorStats(a, amax(r.values), 1.0, r.saturated, r.underflowed, not math.isfinite(a))
            return r.values
        out, st = self.scaler(tag).fake_quantize(t, fmt)
        self.stats[tag] = st
        return out

    def bf16(self, tag: str, t: np.ndarray) -> np.ndarray:
        """BF16 rounding, active whenever any quantization is."""
        if not self.policy or not self.enabled:
            return t
        r = round_array(t, BF16)
        a = amax(t)
        self.stats[tag] = TensorStats(a, amax(r.values), 1.0, r.saturated, r.underflowed, not math.isfinite(a))
        return r.values

    def channel_scales(self, tag: str, t: np.ndarray, fmt: FormatSpec) -> ChannelScales:
        cached = self._channel_scales.get(tag)
        if (cached is not None and 0 <= self.iteration - cached[0] < self.scale_refresh
                and len(cached[1]) == t.shape[1]):
            return cached[1]
        s = per_channel_scales(t, fmt, self.channel_margin, self.workers, self.channel_clamp)
        self._channel_scales[tag] = (self.iteration, s)
        return s

    def channel_q(self, tag: str, t: np.ndarray, fmt: FormatSpec | None = E4M3,
                  scales: ChannelScales | None = None) -> tuple[np.ndarray, ChannelScales]:
        """Per-channel rescale, quantize, and undo the rescale: ``Q(s * t) / s``.

        With ``fmt=None`` the quantizer is the identity but the rescaling is
        still carried out.
        """
        if scales is None:
            scales = self.channel_scales(tag, t, fmt or E4M3)
        a = amax(t)
        if fmt is None:
            out = (t * scales.s) / scales.s
            self.stats[tag] = TensorStats(a, amax(out), float(np.min(scales.s)), 0, 0, not math.isfinite(a))
            return out, scales
        r = round_array(t, fmt, scales.s)
        self.stats[tag] = TensorStats(a, amax(r.values), float(np.min(scales.s)), r.saturated,
                                      r.underflowed, not math.isfinite(a))
        return r.values, scales


NO_QUANT = QuantContext("none")

# ---------------------------------------------------------------- linear

LINEAR_POLICIES = ("none", "bf16", "fp8_forward_e4m3_backward_e5m2")


@dataclass
class LinearLayer:
    W: np.ndarray  # [out x in], master copy
    bias: np.ndarray | None = None
    quant_policy: str = "none"
    name: str = "linear"

    def __post_init__(self):
        if self.quant_policy not in LINEAR_POLICIES:
            raise ValueError(f"unknown quant_policy {self.quant_policy!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("W must be [out x in]")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.W.shape[0],):
                raise ValueError("bias must have length out")


def _linear_fmt(policy: str, backward: bool) -> FormatSpec | None:
    if policy == "none":
        return None
    if policy == "bf16":
        return BF16
    return E5M2 if backward else E4M3


def _apply(t, fmt, source):
    if fmt is None:
        return t
    if fmt is BF16:
        return round_array(t, BF16).values
    return fake_quantize(t, fmt, source)[0]


def linear_forward(x: np.ndarray, layer: LinearLayer, x_scale=None, w_scale=None):
    """``y = Q(x) Q(W)^T + bias``; returns ``(y, cache)``.

    Scale sources follow ``fake_quantize``: a ``DelayedScaler``, a fixed
    float, or ``None`` for just-in-time.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.W.shape[1]:
        raise ValueError(f"input shape {x.shape} does not match W {layer.W.shape}")
    fmt = _linear_fmt(layer.quant_policy, backward=False)
    xq = _apply(x, fmt, x_scale)
    wq = _apply(layer.W, fmt, w_scale)
    y = xq @ wq.T
    if layer.bias is not None:
        y = y + layer.bias
    return y, (xq, wq)


def linear_backward(dy: np.ndarray, cache, layer: LinearLayer, grad_scale=None):
    """Returns ``(dx, dW, dbias)``; ``dy`` is quantized to E5M2 under FP8 policy."""
    xq, wq = cache
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (xq.shape[0], layer.W.shape[0]):
        raise ValueError(f"gradient shape {dy.shape} does not match output ({xq.shape[0]}, {layer.W.shape[0]})")
    dyq = _apply(dy, _linear_fmt(layer.quant_policy, backward=True), grad_scale)
    dx = dyq @ wq
    dW = dyq.T @ xq
    db = dy.sum(axis=0) if layer.bias is not None else None
    return dx, dW, db


# ------------------------------------------------------------------ losses


def mse_loss(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``0.5 * mean over rows of ||y - target||^2`` and its gradient."""
    diff = y - target
    n = y.shape[0]
    return 0.5 * float(np.sum(diff * diff)) / n, diff / n


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy (nats) and gradient w.r.t. logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), targets]))
    d = softmax(logits, axis=1)
    d[np.arange(n), targets] -= 1.0
    return loss, d / n


def l2_penalty(params: dict[str, np.ndarray], mu: float) -> float:
    """``(mu / 2) * sum of squared entries`` over all parameters."""
    if mu < 0:
        raise ValueError("regularization strength must be >= 0")
    return 0.5 * mu * sum(float(np.sum(p * p)) for p in params.values())


def l2_penalty_grad(params: dict[str, np.ndarray], mu: float) -> dict[str, np.ndarray]:
    """Gradient of ``l2_penalty``: ``mu * w`` for each parameter."""
    if mu < 0:
        raise ValueError("regularization strength must be >= 0")
    return {k: mu * p for k, p in params.items()}


# ---------------------------------------------------------------- checking


def grad_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    eps: float = 1e-6,
) -> float:
    """Worst relative discrepancy between ``grads`` and central differences.

    ``loss_fn`` re-evaluates the loss from the arrays in ``params``, which are
    perturbed in place and restored. Per parameter tensor the error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``; the
    maximum over tensors is returned.
    """
    worst = 0.0
    for name, p in params.items():
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn()
            flat[i] = old - eps
            fm = loss_fn()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * eps)
        a = np.asarray(grads[name], dtype=np.float64)
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(num))))
        err = float(np.max(np.abs(a - num)))
        if denom == 0:
            continue
        worst = max(worst, err / denom)
    return worst


# ------------------------------------------------------------------ init


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
