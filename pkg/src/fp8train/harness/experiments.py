"""Multi-run experiments built on ``run_training``."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from fp8train.diagnostics import channel_correlations
from fp8train.nn import NO_QUANT, l2_penalty, l2_penalty_grad
from fp8train.optimizer import AdamConfig, Fp8AdamState, adam_step

from fp8train.harness.config import RunConfig
from fp8train.harness.data import synthetic_dataset
from fp8train.harness.model import RegressionNet, n_params
from fp8train.harness.train import MANIFEST, lr_at, regression_recipe, run_training

# ------------------------------------------------------------- alignment

ALIGN_THRESHOLD = 2.0  # mean |w2 . x| above which a channel must align
ALIGN_COS = 0.95


def alignment_config(seed: int, mu: float = 1e-3, **kw) -> RunConfig:
    """Width-8 SwiGLU regression net (72 parameters) on 3600 samples.

    Inputs sit far out along one direction, so any channel with a sizeable
    gate is saturated on every sample. The tied teacher with a nonnegative
    readout gives a target whose quadratic part is positive semidefinite.
    """
    base = dict(seed=seed, task="regression", d_in=4, hidden=8, d_out=1, n_blocks=1, n_samples=3600,
                batch=3600, input_scale=3.0, input_offset=200.0, teacher_hidden=4, teacher_tied=True,
                precision="none", mu=mu, l2_mode="coupled",
                lr=1e-2, cosine=True, min_lr_ratio=0.01, steps=50_000, diag_every=1000)
    base.update(kw)
    return RunConfig(**base).validate()


@dataclass
class AlignmentReport:
    seed: int
    mu: float
    steps: int
    grad_norm: float
    stationary: bool  # gradient norm fell below the tolerance
    cos: list[float]
    norm_w1: list[float]
    norm_w2: list[float]
    mean_abs_w2x: list[float]
    final_loss: float
    n_params: int
    n_samples: int

    @property
    def large_channels(self) -> list[int]:
        return [i for i, m in enumerate(self.mean_abs_w2x) if m > ALIGN_THRESHOLD]

    @property
    def aligned(self) -> bool:
        """Every channel with large gate inputs has ``|cos| >= ALIGN_COS``."""
        return all(abs(self.cos[i]) >= ALIGN_COS for i in self.large_channels)

    def misaligned_large(self) -> list[int]:
        return [i for i in self.large_channels if abs(self.cos[i]) < ALIGN_COS]


def _grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def alignment_experiment(cfg: RunConfig, tol: float = 1e-5, adam_steps: int = 3000) -> AlignmentReport:
    """Full-batch training of a SwiGLU regression net with coupled L2.

    ``adam_steps`` of Adam move the weights into a basin, then L-BFGS drives
    the gradient norm of the regularized objective below ``tol``. L-BFGS is
    restarted when it stops early on a stalled line search, as long as the
    restart still lowers the gradient norm. Iterations of every stage count
    against ``cfg.steps``; missing the tolerance is reported via
    ``stationary=False``.
    """
    cfg.validate()
    if cfg.task != "regression" or cfg.activation == "gelu":
        raise ValueError("alignment needs a SwiGLU regression config")
    data = synthetic_dataset(cfg.seed, regression_recipe(cfg))
    model = RegressionNet(cfg, np.random.default_rng([cfg.seed, 0]))
    names = list(model.params)

    def objective():
        loss, grads, _ = model.loss_and_grads((data.x, data.y), NO_QUANT)
        loss += l2_penalty(model.params, cfg.mu)
        for k, g in l2_penalty_grad(model.params, cfg.mu).items():
            grads[k] = grads[k] + g
        return loss, grads

    adam = AdamConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    state = Fp8AdamState()
    phase1 = min(adam_steps, cfg.steps)
    warm = cfg.replace(steps=phase1)
    loss, grads = objective()
    step = 0
    while step < phase1 and _grad_norm(grads) >= tol and math.isfinite(loss):
        adam_step(model.params, grads, state, adam, lr=lr_at(warm, step))
        step += 1
        loss, grads = objective()

    def unpack(theta):
        off = 0
        for k in names:
            p = model.params[k]
            p[...] = theta[off:off + p.size].reshape(p.shape)
            off += p.size

    def pack():
        return np.concatenate([model.params[k].ravel() for k in names])

    def fun(theta):
        unpack(theta)
        f, g = objective()
        return f, np.concatenate([g[k].ravel() for k in names])

    gnorm = _grad_norm(grads)
    while gnorm >= tol and step < cfg.steps and math.isfinite(loss):
        remaining = cfg.steps - step
        res = minimize(fun, pack(), jac=True, method="L-BFGS-B",
                       options={"maxiter": remaining, "maxfun": 2 * remaining,
                                "gtol": tol / 10, "ftol": 0.0, "maxcor": 30})
        unpack(res.x)
        step += max(int(res.nit), 1)
        loss, grads = objective()
        before, gnorm = gnorm, _grad_norm(grads)
        if gnorm >= before:
            break
    block = model.blocks[0][1]
    cos, n1, n2 = channel_correlations(block.w1, block.w2)
    mean_gate = np.mean(np.abs(data.x @ block.w2), axis=0)
    return AlignmentReport(cfg.seed, cfg.mu, step, gnorm, gnorm < tol, cos.tolist(), n1.tolist(),
                           n2.tolist(), mean_gate.tolist(), float(loss), n_params(model), len(data))


# ------------------------------------------------------------- optimizer

MOMENT_COMBOS = (("FP32", "FP32"), ("E4M3", "E4M3"), ("E4M3", "E5M2"), ("E5M2", "E4M3"), ("E5M2", "E5M2"))


@dataclass
class SweepRow:
    m_format: str
    v_format: str
    final_loss: float
    diverged: bool
    v_underflow: int
    v_saturated: int
    wall_time: float

    @property
    def label(self) -> str:
        return f"m={self.m_format},v={self.v_format}"


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def row(self, m: str, v: str) -> SweepRow:
        return next(r for r in self.rows if (r.m_format, r.v_format) == (m, v))

    @property
    def baseline(self) -> SweepRow:
        return self.row("FP32", "FP32")

    def relative_gap(self, m: str, v: str) -> float:
        return abs(self.row(m, v).final_loss - self.baseline.final_loss) / self.baseline.final_loss

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def optimizer_sweep(base: RunConfig, out_dir=None, combos=MOMENT_COMBOS) -> SweepReport:
    """FP32-moment baseline plus every FP8 (m, v) combination, same seed and data."""
    report = SweepReport()
    for m, v in combos:
        cfg = base.replace(m_format=m, v_format=v)
        sub = None if out_dir is None else Path(out_dir) / f"m_{m}_v_{v}"
        art = run_training(cfg, sub)
        report.rows.append(SweepRow(m, v, art.final_loss, art.diverged, art.v_underflow, art.v_saturated,
                                    art.wall_time))
    if out_dir is not None:
        (Path(out_dir) / "sweep.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def sweep_config(seed: int = 0, **kw) -> RunConfig:
    """Byte LM of about 184k parameters used for the moment-format sweep."""
    base = dict(seed=seed, task="lm", precision="bf16_baseline", context=8, embed=16, hidden=192,
                n_blocks=2, batch=32, lr=3e-3, cosine=True, warmup=100, steps=5000, diag_every=250)
    base.update(kw)
    return RunConfig(**base).validate()


# ----------------------------------------------------------------- spike


@dataclass
class SpikeReport:
    spike_iter: int
    factor: float
    saturations: dict[str, int]  # precision -> saturations at the SwiGLU output on the spike step
    amax_trace: list[float]  # pre-quantization amax of the SwiGLU output, per step


def spike_config(seed: int = 0, **kw) -> RunConfig:
    base = dict(seed=seed, task="spike_stream", d_in=16, d_out=16, hidden=64, n_blocks=1, batch=64,
                steps=40, spike_iter=20, spike_factor=100.0, diag_every=1, lr=1e-3)
    base.update(kw)
    return RunConfig(**base).validate()


def spike_experiment(base: RunConfig, precisions=("fp8_full", "fp8_smooth_swiglu")) -> SpikeReport:
    """Run the same spiked stream under each precision; count output-quantizer saturations."""
    sats, trace = {}, []
    tag = "mlp0.u"
    for p in precisions:
        art = run_training(base.replace(precision=p, activation="swiglu"))
        rec = next(r for r in art.records if r.iteration == base.spike_iter)
        sats[p] = rec.tensors[tag].saturations if tag in rec.tensors else 0
        if not trace:
            trace = [r.tensors[tag].amax for r in art.records if tag in r.tensors]
    return SpikeReport(base.spike_iter, base.spike_factor, sats, trace)


# ------------------------------------------------------------------- lr


def lr_sweep(base: RunConfig, lrs, activations=("swiglu", "smooth_swiglu")) -> list[dict]:
    rows = []
    for act in activations:
        for lr in lrs:
            art = run_training(base.replace(activation=act, lr=float(lr)))
            rows.append({"activation": act, "lr": float(lr), "final_loss": art.final_loss,
                         "diverged": art.diverged})
    return rows


# -------------------------------------------------------------- compare


def compare(run_dirs) -> list[dict]:
    """Side-by-side summary of finished runs from their manifests."""
    rows = []
    for d in run_dirs:
        m = json.loads((Path(d) / MANIFEST).read_text())
        c = m["config"]
        rows.append({"run": str(d), "precision": c["precision"], "activation": c["activation"],
                     "m_format": c["m_format"], "v_format": c["v_format"], "final_loss": m["final_loss"],
                     "diverged": m["diverged"], "steps": m["steps_completed"],
                     "v_underflow": m.get("v_underflow_total", 0)})
    return rows
