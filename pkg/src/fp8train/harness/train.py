"""Single training run: data, model, precision policy, optimizer, artifacts."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fp8train import _backend
from fp8train.checkpoint import save_checkpoint
from fp8train.diagnostics import (
    DiagnosticsRecord,
    input_magnitude_histogram,
    record_channels,
    record_tensor,
    write_diagnostics_csv,
    write_histogram_csv,
)
from fp8train.nn import QuantContext, l2_penalty, l2_penalty_grad
from fp8train.optimizer import AdamConfig, DivergenceError, Fp8AdamState, adam_step
from fp8train.swiglu import SwiGluBlock

from fp8train.harness.config import RunConfig
from fp8train.harness.data import ByteBatcher, load_corpus, step_rng, synthetic_dataset, synthetic_text
from fp8train.harness.model import build_model

LOSS_CSV = "loss.csv"
DIAG_CSV = "diagnostics.csv"
CHECKPOINT = "checkpoint.bin"
MANIFEST = "manifest.json"
CONFIG = "config.json"


@dataclass
class RunArtifacts:
    out_dir: Path | None
    losses: list[float]
    records: list[DiagnosticsRecord]
    diverged: bool
    final_loss: float
    steps_completed: int
    wall_time: float
    model: object = None
    opt_state: Fp8AdamState | None = None
    ctx: QuantContext | None = None
    v_underflow: int = 0
    v_saturated: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def manifest(self) -> dict:
        return json.loads((self.out_dir / MANIFEST).read_text()) if self.out_dir else {}


def lr_at(cfg: RunConfig, step: int) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr`` (or constant)."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    if not cfg.cosine:
        return cfg.lr
    span = max(cfg.steps - cfg.warmup, 1)
    t = min((step - cfg.warmup) / span, 1.0)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * t))


def make_context(cfg: RunConfig) -> QuantContext:
    return QuantContext(cfg.precision, cfg.history_len, cfg.margin, cfg.reduction, cfg.channel_margin,
                        cfg.scale_refresh, cfg.workers, enabled=cfg.quantization)


def regression_recipe(cfg: RunConfig) -> dict:
    return {"kind": "regression", "n": cfg.n_samples, "d": cfg.d_in, "d_out": cfg.d_out,
            "input_scale": cfg.input_scale, "input_offset": cfg.input_offset, "noise": cfg.noise,
            "teacher_hidden": cfg.teacher_hidden, "teacher_tied": cfg.teacher_tied,
            "clusters": cfg.clusters,
            "cluster_spread": cfg.cluster_spread}


def make_data(cfg: RunConfig):
    """Returns ``(batch_fn, dataset)``; ``batch_fn(step)`` is deterministic."""
    if cfg.task == "lm":
        if cfg.corpus:
            tokens = load_corpus(cfg.corpus)
        else:
            tokens = np.frombuffer(synthetic_text(cfg.seed, cfg.corpus_bytes), dtype=np.uint8).astype(np.int64)
        batcher = ByteBatcher(tokens, cfg.batch, cfg.context, cfg.seed)
        return batcher, tokens
    if cfg.task == "regression":
        data = synthetic_dataset(cfg.seed, regression_recipe(cfg))
        if cfg.batch >= len(data):
            return (lambda step: (data.x, data.y)), data

        def batch(step):
            idx = step_rng(cfg.seed, step, 3).integers(0, len(data), size=cfg.batch)
            return data.x[idx], data.y[idx]
        return batch, data
    stream = synthetic_dataset(cfg.seed, {
        "kind": "spike_stream", "tokens": cfg.batch, "d": cfg.d_in, "d_out": cfg.d_out,
        "spike_iter": cfg.spike_iter, "factor": cfg.spike_factor,
    })
    return stream.batch, stream


def collect_diagnostics(it: int, model, ctx: QuantContext, block_inputs) -> DiagnosticsRecord:
    rec = DiagnosticsRecord(it)
    for tag, block in model.blocks:
        utag = f"{tag}.u"
        if utag in ctx.channel_amax:
            rec.channel_amax[utag] = ctx.channel_amax[utag]
            rec.per_layer_amax[utag] = float(np.max(ctx.channel_amax[utag], initial=0.0))
        if isinstance(block, SwiGluBlock):
            record_channels(rec, utag, block.w1, block.w2)
    for tag in sorted(ctx.stats):
        record_tensor(rec, tag, ctx.stats[tag])
    for tag in ctx.stats:
        if ctx.stats[tag].nonfinite:
            rec.diverged.add(tag)
    return rec


def _write_loss_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("step", "loss", "lr"))
        for step, loss, lr in rows:
            w.writerow((step, repr(float(loss)), repr(float(lr))))


def smoothed_final_loss(losses: list[float], window: int = 100) -> float:
    """Mean training loss over the last ``window`` steps (at most a tenth of the run)."""
    if not losses:
        return math.nan
    k = max(1, min(window, len(losses) // 10))
    return float(np.mean(losses[-k:]))


def run_training(cfg: RunConfig, out_dir=None, hooks: dict | None = None,
                 histogram_snapshots: tuple[int, ...] = ()) -> RunArtifacts:
    """Train under ``cfg``; write artifacts to ``out_dir`` when given.

    A non-finite loss or gradient, or a loss above ``cfg.blowup_ratio``
    times the first loss, stops the run and sets the divergence flag;
    everything logged up to that point is still written.
    """
    cfg.validate()
    t0 = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 0])
    batch_fn, dataset = make_data(cfg)
    model = build_model(cfg, rng)
    ctx = make_context(cfg)
    if cfg.task == "spike_stream":
        ctx.hooks[f"{model.blocks[0][0]}.u"] = dataset.inject
    if hooks:
        ctx.hooks.update(hooks)
    adam = AdamConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.m_format, cfg.v_format, cfg.master_format,
                      weight_decay=cfg.mu if cfg.l2_mode == "decoupled" else 0.0)
    coupled_mu = cfg.mu if cfg.l2_mode == "coupled" else 0.0
    state = Fp8AdamState()
    losses, loss_rows, records, hists = [], [], [], {}
    diverged = False
    v_under = v_sat = 0
    step = 0
    for step in range(cfg.steps):
        ctx.begin_step(step)
        lr = lr_at(cfg, step)
        batch = batch_fn(step)
        with np.errstate(all="ignore"):
            loss, grads, block_inputs = model.loss_and_grads(batch, ctx)
        if coupled_mu:
            loss += l2_penalty(model.params, coupled_mu)
            for k, g in l2_penalty_grad(model.params, coupled_mu).items():
                grads[k] = grads[k] + g
        losses.append(loss)
        loss_rows.append((step, loss, lr))
        if step % cfg.diag_every == 0 or step == cfg.steps - 1 or not math.isfinite(loss):
            records.append(collect_diagnostics(step, model, ctx, block_inputs))
        if step in histogram_snapshots:
            tag, block = model.blocks[0]
            if isinstance(block, SwiGluBlock):
                i = int(np.argmax(ctx.channel_amax[f"{tag}.u"]))
                hists[step] = input_magnitude_histogram(block_inputs[0], block.w2[:, i])
        blown_up = cfg.blowup_ratio and loss > cfg.blowup_ratio * abs(losses[0])
        if not math.isfinite(loss) or blown_up:
            diverged = True
            break
        try:
            adam_step(model.params, grads, state, adam, lr=lr)
        except DivergenceError:
            diverged = True
            break
        v_under += state.v_underflow_total()
        v_sat += sum(st.saturated for st in state.v_stats.values())
    wall = time.perf_counter() - t0
    final = smoothed_final_loss(losses) if not diverged else math.nan
    art = RunArtifacts(None, losses, records, diverged, final, len(losses), wall, model, state, ctx,
                       v_under, v_sat)
    art.extra["histograms"] = hists
    if out_dir is not None:
        write_artifacts(art, cfg, Path(out_dir), loss_rows)
    return art


def write_artifacts(art: RunArtifacts, cfg: RunConfig, out: Path, loss_rows) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_loss_csv(out / LOSS_CSV, loss_rows)
    write_diagnostics_csv(art.records, out / DIAG_CSV)
    for step, h in art.extra.get("histograms", {}).items():
        write_histogram_csv(h, out / f"histogram_{step:06d}.csv")
    save_checkpoint(out / CHECKPOINT, art.model.params, art.opt_state)
    manifest = {
        "config": cfg.to_dict(),
        "wall_time": art.wall_time,
        "diverged": art.diverged,
        "final_loss": art.final_loss if math.isfinite(art.final_loss) else None,
        "steps_completed": art.steps_completed,
        "last_loss": art.losses[-1] if art.losses and math.isfinite(art.losses[-1]) else None,
        "v_underflow_total": art.v_underflow,
        "v_saturation_total": art.v_saturated,
        "backend": _backend.BACKEND,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / CONFIG).write_text(cfg.to_json() + "\n")
    art.out_dir = out
