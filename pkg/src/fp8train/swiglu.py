"""SwiGLU, Smooth-SwiGLU and GeLU MLP blocks.

A SwiGLU channel ``i`` computes ``(x . w1[:, i]) * swish(x . w2[:, i])``.
Because both factors grow linearly with the input, the channel output grows
quadratically once ``w1[:, i]`` and ``w2[:, i]`` point the same way.

Smooth-SwiGLU multiplies each channel by ``s_i`` before the FP8 quantizer
that feeds ``w3`` and divides it back out in the ``w3`` product, so the
block computes the same function while every channel uses the full FP8 range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from fp8train.numerics import E4M3, FormatSpec, round_array
from fp8train.nn import NO_QUANT, QuantContext, fake_quantize, init_uniform
from fp8train.scaling import ChannelScales, per_channel_scales

MODES = ("swiglu", "smooth_swiglu", "swiglu_out_bf16")
SCALE_CLAMP = (2.0**-30, 2.0**30)


def sigmoid(z):
    # exp(-z) overflows to inf for z < -709, giving the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def swish(z):
    """``z * sigmoid(z)``."""
    return z * sigmoid(z)


def swish_grad(z, s=None):
    """Derivative of ``swish``; pass ``s = sigmoid(z)`` to reuse it."""
    s = sigmoid(z) if s is None else s
    return s + z * s * (1.0 - s)


def gelu(z):
    return z * ndtr(z)


def gelu_grad(z):
    return ndtr(z) + z * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


@dataclass
class SwiGluBlock:
    w1: np.ndarray  # [d x h] linear branch
    w2: np.ndarray  # [d x h] gate branch
    w3: np.ndarray  # [h x d] output projection
    mode: str = "swiglu"
    channel_scales: ChannelScales | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.w1.shape != self.w2.shape:
            raise ValueError(f"w1 {self.w1.shape} and w2 {self.w2.shape} must share a shape")
        if self.w3.shape[0] != self.w1.shape[1]:
            raise ValueError(f"w3 {self.w3.shape} must take {self.w1.shape[1]} inputs")
        if self.channel_scales is not None and len(self.channel_scales) != self.hidden:
            raise ValueError("channel_scales length must equal the hidden width")

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, h: int, d_out: int | None = None, mode: str = "swiglu"):
        d_out = d if d_out is None else d_out
        return cls(
            init_uniform(rng, (d, h), d),
            init_uniform(rng, (d, h), d),
            init_uniform(rng, (h, d_out), h),
            mode,
        )


@dataclass
class SwiGluState:
    xq: np.ndarray
    w1q: np.ndarray
    w2q: np.ndarray
    a: np.ndarray  # x . w1
    b: np.ndarray  # x . w2
    u: np.ndarray  # raw SwiGLU output
    uq: np.ndarray | None = None  # what w3 actually consumed
    w3q: np.ndarray | None = None
    scales: ChannelScales | None = None
    extra: dict = field(default_factory=dict)


def swiglu_forward(x: np.ndarray, block: SwiGluBlock, ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    """Raw SwiGLU output ``u`` (before the output quantizer) and saved state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != block.d:
        raise ValueError(f"input shape {x.shape} does not match block input width {block.d}")
    xq = ctx.q(f"{tag}.x", "act", x)
    w1q = ctx.q(f"{tag}.w1", "weight", block.w1)
    w2q = ctx.q(f"{tag}.w2", "weight", block.w2)
    a = xq @ w1q
    b = xq @ w2q
    sig = sigmoid(b)
    u = ctx.hook(f"{tag}.u", a * (b * sig))
    return u, SwiGluState(xq, w1q, w2q, a, b, u, extra={"sig": sig})


def swiglu_backward(du: np.ndarray, state: SwiGluState, block: SwiGluBlock,
                    ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    """Gradients of ``u = a * swish(b)`` w.r.t. ``(x, w1, w2)``.

    ``da = du * swish(b)`` and ``db = du * a * swish'(b)``; both are quantized
    to the gradient format before their matmuls when FP8 is active.
    """
    if du.shape != state.u.shape:
        raise ValueError(f"gradient shape {du.shape} does not match saved output {state.u.shape}")
    sig = state.extra.get("sig")
    if sig is None:
        sig = sigmoid(state.b)
    da = du * (state.b * sig)
    db = du * state.a * swish_grad(state.b, sig)
    daq = ctx.q(f"{tag}.da", "grad", da)
    dbq = ctx.q(f"{tag}.db", "grad", db)
    dx = daq @ state.w1q.T + dbq @ state.w2q.T
    dw1 = state.xq.T @ daq
    dw2 = state.xq.T @ dbq
    return dx, dw1, dw2


def _output_quantizer(u: np.ndarray, block: SwiGluBlock, ctx: QuantContext, tag: str):
    """Returns ``(uq, scales)``: the tensor fed to w3 and any channel scales."""
    utag = f"{tag}.u"
    ctx.channel_amax[utag] = np.max(np.abs(u), axis=0) if u.size else np.zeros(u.shape[1])
    if block.mode == "swiglu":
        return ctx.q(utag, "act", u), None
    if block.mode == "swiglu_out_bf16":
        return ctx.bf16(utag, u), None
    if not ctx.enabled:
        return u, None
    fmt = ctx.format_for("act")
    uq, scales = ctx.channel_q(utag, u, fmt)
    block.channel_scales = scales
    return uq, scales


def smooth_swiglu_forward(x: np.ndarray, block: SwiGluBlock, ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    """Per-channel rescaled and quantized SwiGLU output.

    Returns ``(uq, scales, state)`` where ``uq = Q(s * u) / s`` is what the
    ``w3`` product consumes. With an identity quantizer ``uq`` equals ``u`` up
    to float64 rounding.
    """
    if block.mode != "smooth_swiglu":
        raise ValueError("block is not in smooth_swiglu mode")
    u, state = swiglu_forward(x, block, ctx, tag)
    uq, scales = _output_quantizer(u, block, ctx, tag)
    if scales is None:
        scales = per_channel_scales(u, E4M3, ctx.channel_margin, clamp=SCALE_CLAMP)
        uq = (u * scales.s) / scales.s
    state.uq, state.scales = uq, scales
    return uq, scales, state


def mlp_forward(x: np.ndarray, block: SwiGluBlock, ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    """``y = Q_out(u) . Q(w3)`` where ``Q_out`` depends on ``block.mode``."""
    u, state = swiglu_forward(x, block, ctx, tag)
    uq, scales = _output_quantizer(u, block, ctx, tag)
    w3q = ctx.q(f"{tag}.w3", "weight", block.w3)
    state.uq, state.w3q, state.scales = uq, w3q, scales
    return uq @ w3q, state


def mlp_backward(dy: np.ndarray, state: SwiGluState, block: SwiGluBlock,
                 ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    """Returns ``(dx, {"w1", "w2", "w3"})`` for ``mlp_forward``."""
    dyq = ctx.q(f"{tag}.dy", "grad", dy)
    du = dyq @ state.w3q.T
    dw3 = state.uq.T @ dyq
    dx, dw1, dw2 = swiglu_backward(du, state, block, ctx, tag)
    return dx, {"w1": dw1, "w2": dw2, "w3": dw3}


# ---------------------------------------------------------------- folding


class FoldingError(ValueError):
    pass


def channel_qdq(w: np.ndarray, fmt: FormatSpec | None, axis: int) -> np.ndarray:
    """Quantize-dequantize ``w`` with one just-in-time scale per slice along ``axis``.

    ``axis=0`` scales each column, ``axis=1`` each row.
    """
    if fmt is None:
        return w
    if axis == 1:
        return channel_qdq(w.T, fmt, 0).T
    return round_array(w, fmt, per_channel_scales(w, fmt).s).values


def fold_scales(block: SwiGluBlock, fmt: FormatSpec | None = E4M3):
    """Absorb channel scales into the weights for inference.

    Returns ``(w1_tilde, w3_tilde)`` with ``w1_tilde[:, i] = Q(s_i * w1[:, i])``
    and ``w3_tilde[i, :] = Q(w3[i, :] / s_i)``. ``Q`` quantizes each channel
    (column of w1, row of w3) with its own scale, so the folded weights carry
    exactly the precision of the unfolded ones; a single per-tensor scale
    would starve the channels with small ``s_i``. ``fmt=None`` skips ``Q``.
    """
    if block.mode != "smooth_swiglu" or block.channel_scales is None:
        raise FoldingError("folding needs a smooth_swiglu block with channel scales")
    s = block.channel_scales.s
    with np.errstate(over="ignore", invalid="ignore"):
        w1s = block.w1 * s[None, :]
        w3s = block.w3 / s[:, None]
    if not (np.all(np.isfinite(w1s)) and np.all(np.isfinite(w3s))):
        raise FoldingError("folded weights are not finite; re-derive the channel scales")
    return channel_qdq(w1s, fmt, 0), channel_qdq(w3s, fmt, 1)


def folded_forward(x: np.ndarray, w1_tilde: np.ndarray, w2: np.ndarray, w3_tilde: np.ndarray,
                   fmt: FormatSpec | None = E4M3, return_hidden: bool = False):
    """Inference with folded weights: no runtime channel scaling.

    The hidden activation is quantized with a unit scale since the folded
    ``w1`` already places every channel in range.
    """
    xq = x if fmt is None else fake_quantize(x, fmt)[0]
    v = (xq @ w1_tilde) * swish(xq @ channel_qdq(w2, fmt, 0))
    vq = v if fmt is None else round_array(v, fmt).values
    y = vq @ w3_tilde
    return (y, vq) if return_hidden else y


def runtime_scaled_forward(x: np.ndarray, block: SwiGluBlock, fmt: FormatSpec | None = E4M3,
                           return_hidden: bool = False):
    """Reference for folding: ``sum_i s_i^-1 Q(w3_i) Q(s_i * u_i)``.

    Weights use the same per-channel quantizer as ``fold_scales``.
    """
    s = block.channel_scales.s
    xq = x if fmt is None else fake_quantize(x, fmt)[0]
    u = (xq @ channel_qdq(block.w1, fmt, 0)) * swish(xq @ channel_qdq(block.w2, fmt, 0))
    v = s * u
    vq = v if fmt is None else round_array(v, fmt).values
    y = (vq / s) @ channel_qdq(block.w3, fmt, 1)
    return (y, vq) if return_hidden else y


# -------------------------------------------------------------------- GeLU


@dataclass
class GeluBlock:
    w1: np.ndarray  # [d x h]
    w2: np.ndarray  # [h x d]

    def __post_init__(self):
        if self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError(f"w2 {self.w2.shape} must take {self.w1.shape[1]} inputs")

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2}

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, h: int, d_out: int | None = None):
        d_out = d if d_out is None else d_out
        return cls(init_uniform(rng, (d, h), d), init_uniform(rng, (h, d_out), h))


def gelu_block_forward(x: np.ndarray, block: GeluBlock, ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != block.w1.shape[0]:
        raise ValueError(f"input shape {x.shape} does not match block input width {block.w1.shape[0]}")
    xq = ctx.q(f"{tag}.x", "act", x)
    w1q = ctx.q(f"{tag}.w1", "weight", block.w1)
    a = xq @ w1q
    g = ctx.hook(f"{tag}.u", gelu(a))
    ctx.channel_amax[f"{tag}.u"] = np.max(np.abs(g), axis=0) if g.size else np.zeros(g.shape[1])
    gq = ctx.q(f"{tag}.u", "act", g)
    w2q = ctx.q(f"{tag}.w2", "weight", block.w2)
    return gq @ w2q, (xq, w1q, a, gq, w2q)


def gelu_block_backward(dy: np.ndarray, state, block: GeluBlock, ctx: QuantContext = NO_QUANT, tag: str = "mlp"):
    xq, w1q, a, gq, w2q = state
    dyq = ctx.q(f"{tag}.dy", "grad", dy)
    dg = dyq @ w2q.T
    dw2 = gq.T @ dyq
    da = ctx.q(f"{tag}.da", "grad", dg * gelu_grad(a))
    dx = da @ w1q.T
    dw1 = xq.T @ da
    return dx, {"w1": dw1, "w2": dw2}
