"""Toy models: a SwiGLU regression stack and a byte-level language model.

Both expose ``params`` (live arrays the optimizer updates in place),
``blocks`` (``(tag, block)`` pairs for diagnostics) and
``loss_and_grads(batch, ctx)``.
"""

from __future__ import annotations

import numpy as np

from fp8train.nn import BLOCK_MODE, QuantContext, cross_entropy, init_uniform, mse_loss
from fp8train.swiglu import (
    GeluBlock,
    SwiGluBlock,
    gelu_block_backward,
    gelu_block_forward,
    mlp_backward,
    mlp_forward,
)

from fp8train.harness.config import RunConfig


def block_mode(cfg: RunConfig) -> str:
    if cfg.activation == "gelu":
        return "gelu"
    if cfg.activation == "smooth_swiglu":
        return "smooth_swiglu"
    return BLOCK_MODE[cfg.precision]


def _make_block(rng, d, h, d_out, mode):
    if mode == "gelu":
        return GeluBlock.init(rng, d, h, d_out)
    return SwiGluBlock.init(rng, d, h, d_out, mode)


def _fwd(x, block, ctx, tag):
    if isinstance(block, GeluBlock):
        return gelu_block_forward(x, block, ctx, tag)
    return mlp_forward(x, block, ctx, tag)


def _bwd(dy, state, block, ctx, tag):
    if isinstance(block, GeluBlock):
        return gelu_block_backward(dy, state, block, ctx, tag)
    return mlp_backward(dy, state, block, ctx, tag)


class _Stack:
    """Blocks ``0..n-2`` are residual ``d -> d``; the last maps ``d -> d_out``."""

    def __init__(self, rng, d, h, d_out, n_blocks, mode):
        self.blocks = []
        for i in range(n_blocks):
            out = d_out if i == n_blocks - 1 else d
            self.blocks.append((f"mlp{i}", _make_block(rng, d, h, out, mode)))
        self.residual = [i < n_blocks - 1 or d_out == d for i in range(n_blocks)]

    def forward(self, x, ctx):
        states, inputs = [], []
        for (tag, b), res in zip(self.blocks, self.residual):
            inputs.append(x)
            y, st = _fwd(x, b, ctx, tag)
            states.append(st)
            x = x + y if res else y
        return x, (states, inputs)

    def backward(self, dy, cache, ctx, grads):
        states, _ = cache
        for (tag, b), res, st in reversed(list(zip(self.blocks, self.residual, states))):
            dx, g = _bwd(dy, st, b, ctx, tag)
            for k, v in g.items():
                grads[f"{tag}.{k}"] = v
            dy = dx + dy if res else dx
        return dy

    def params(self):
        return {f"{tag}.{k}": v for tag, b in self.blocks for k, v in b.params().items()}


class RegressionNet:
    """SwiGLU (or GeLU) stack trained with mean squared error."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.stack = _Stack(rng, cfg.d_in, cfg.hidden, cfg.d_out, cfg.n_blocks, block_mode(cfg))
        self.blocks = self.stack.blocks
        self.params = self.stack.params()

    def predict(self, x, ctx):
        return self.stack.forward(x, ctx)

    def loss_and_grads(self, batch, ctx: QuantContext):
        x, y = batch
        pred, cache = self.stack.forward(x, ctx)
        loss, dpred = mse_loss(pred, y)
        grads = {}
        self.stack.backward(dpred, cache, ctx, grads)
        return loss, grads, cache[1]


class ByteLM:
    """Next-byte prediction from a fixed window of ``context`` bytes.

    The window's embeddings are concatenated into one vector, passed through
    residual MLP blocks, and projected onto the 256-byte vocabulary.
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.context = cfg.context
        d = cfg.context * cfg.embed
        self.embed = rng.standard_normal((256, cfg.embed)) * 0.5
        self.stack = _Stack(rng, d, cfg.hidden, d, cfg.n_blocks, block_mode(cfg))
        self.head = init_uniform(rng, (d, 256), d)
        self.blocks = self.stack.blocks
        self.params = {"embed": self.embed, **self.stack.params(), "head": self.head}

    def logits(self, tokens, ctx):
        h0 = self.embed[tokens].reshape(tokens.shape[0], -1)
        h, cache = self.stack.forward(h0, ctx)
        hq = ctx.q("head.x", "act", h)
        wq = ctx.q("head.w", "weight", self.head)
        return hq @ wq, (cache, hq, wq)

    def loss_and_grads(self, batch, ctx: QuantContext):
        inputs, targets = batch
        tokens = inputs[:, -self.context:]
        logits, (cache, hq, wq) = self.logits(tokens, ctx)
        loss, dlogits = cross_entropy(logits, targets[:, -1])
        dq = ctx.q("head.dy", "grad", dlogits)
        grads = {"head": hq.T @ dq}
        dh0 = self.stack.backward(dq @ wq.T, cache, ctx, grads)
        demb = np.zeros_like(self.embed)
        np.add.at(demb, tokens.reshape(-1), dh0.reshape(-1, self.embed.shape[1]))
        grads["embed"] = demb
        return loss, grads, cache[1]


def build_model(cfg: RunConfig, rng: np.random.Generator):
    if cfg.task == "lm":
        return ByteLM(cfg, rng)
    return RegressionNet(cfg, rng)


def n_params(model) -> int:
    return sum(p.size for p in model.params.values())
