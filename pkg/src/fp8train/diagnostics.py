"""Training instrumentation: amax traces, channel alignment, magnitude histograms.

Everything here is a pure function of the arrays handed in, so records are
reproducible whenever the training run is.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_EVERY = 10
DEFAULT_RATIO = 10.0
DEFAULT_COS = 0.9

CSV_COLUMNS = (
    "iteration", "layer", "tensor", "channel", "cos_w1w2", "norm_w1", "norm_w2",
    "amax", "amax_post", "scale", "saturations", "underflows", "diverged",
)


@dataclass
class ChannelStat:
    cos_w1w2: float
    norm_w1: float
    norm_w2: float


@dataclass
class TensorRecord:
    """Quantizer-level numbers for one tensor tag on one iteration."""

    amax: float = 0.0  # before quantization
    amax_post: float = 0.0
    scale: float = 1.0
    saturations: int = 0
    underflows: int = 0


@dataclass
class MagnitudeHistogram:
    edges: np.ndarray  # natural-log bin edges
    counts: np.ndarray
    frac_below_1: float
    frac_below_e: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class DiagnosticsRecord:
    iteration: int
    per_layer_amax: dict[str, float] = field(default_factory=dict)
    per_channel: dict[tuple[str, int], ChannelStat] = field(default_factory=dict)
    channel_amax: dict[str, np.ndarray] = field(default_factory=dict)
    tensors: dict[str, TensorRecord] = field(default_factory=dict)
    histograms: dict[str, MagnitudeHistogram] = field(default_factory=dict)
    diverged: set[str] = field(default_factory=set)

    @property
    def saturation_counts(self) -> dict[str, int]:
        return {tag: t.saturations for tag, t in self.tensors.items()}


# ------------------------------------------------------------ alignment


def channel_correlation(w1_col, w2_col) -> float:
    """Cosine of the angle between two weight vectors; 0 if either is zero."""
    a = np.asarray(w1_col, dtype=np.float64).ravel()
    b = np.asarray(w2_col, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def channel_correlations(w1: np.ndarray, w2: np.ndarray):
    """Per-column ``(cos, |w1|, |w2|)`` for ``[d x h]`` weight matrices."""
    if w1.shape != w2.shape:
        raise ValueError(f"shape mismatch: {w1.shape} vs {w2.shape}")
    n1 = np.linalg.norm(w1, axis=0)
    n2 = np.linalg.norm(w2, axis=0)
    denom = n1 * n2
    dots = np.einsum("ij,ij->j", w1, w2)
    cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0), n1, n2


def record_channels(record: DiagnosticsRecord, layer: str, w1: np.ndarray, w2: np.ndarray) -> DiagnosticsRecord:
    cos, n1, n2 = channel_correlations(w1, w2)
    for i in range(cos.size):
        record.per_channel[(layer, i)] = ChannelStat(float(cos[i]), float(n1[i]), float(n2[i]))
    return record


# ----------------------------------------------------------------- amax


def record_amax(record: DiagnosticsRecord, layer: str, t, channel_axis: int | None = None) -> DiagnosticsRecord:
    """Store max |t| for ``layer``; a non-finite tensor sets the divergence flag instead.

    With ``channel_axis`` the per-channel maxima are kept too.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        record.diverged.add(layer)
        record.per_layer_amax.pop(layer, None)
        return record
    record.per_layer_amax[layer] = float(np.max(np.abs(t))) if t.size else 0.0
    if channel_axis is not None:
        axes = tuple(a for a in range(t.ndim) if a != channel_axis % t.ndim)
        record.channel_amax[layer] = np.max(np.abs(t), axis=axes) if t.size else np.zeros(t.shape[channel_axis])
    return record


def record_tensor(record: DiagnosticsRecord, tag: str, stats) -> DiagnosticsRecord:
    """Copy a quantizer's ``TensorStats`` into the record."""
    record.tensors[tag] = TensorRecord(stats.amax_pre, stats.amax_post, stats.scale,
                                       stats.saturated, stats.underflowed)
    if stats.nonfinite:
        record.diverged.add(tag)
    return record


def amax_series(records: list[DiagnosticsRecord], layer: str) -> tuple[np.ndarray, np.ndarray]:
    """``(iterations, amax)`` for ``layer``, skipping diverged entries."""
    its = [r.iteration for r in records if layer in r.per_layer_amax]
    vals = [r.per_layer_amax[layer] for r in records if layer in r.per_layer_amax]
    return np.asarray(its, dtype=np.int64), np.asarray(vals)


# ------------------------------------------------------------ histogram


def input_magnitude_histogram(x: np.ndarray, w2_col: np.ndarray, bins=None) -> MagnitudeHistogram:
    """Histogram of ``ln |x_n . w2|`` over the tokens of ``x``.

    ``bins`` is an edge array on the natural-log axis (default 40 bins over
    [-10, 10]); values outside, including exact zeros, land in the end bins
    so every token is counted once.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a nonempty [tokens x features] batch")
    edges = np.linspace(-10.0, 10.0, 41) if bins is None else np.asarray(bins, dtype=np.float64)
    mag = np.abs(x @ np.asarray(w2_col, dtype=np.float64))
    with np.errstate(divide="ignore"):
        logm = np.log(mag)
    clipped = np.clip(logm, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    n = mag.size
    return MagnitudeHistogram(edges, counts, float(np.count_nonzero(mag < 1.0)) / n,
                              float(np.count_nonzero(mag < math.e)) / n)


# ------------------------------------------------------------- outliers


def detect_outlier_channels(
    records: list[DiagnosticsRecord],
    layer: str,
    amax_ratio_threshold: float = DEFAULT_RATIO,
    cos_threshold: float = DEFAULT_COS,
    recent: int = 1,
) -> set[int]:
    """Channels that spike and are aligned.

    A channel is flagged when its amax over the last ``recent`` records
    exceeds ``amax_ratio_threshold`` times the median channel amax over the
    whole series, and its latest ``|cos(w1, w2)|`` exceeds ``cos_threshold``.
    """
    series = [r for r in records if layer in r.channel_amax]
    if not series:
        raise ValueError(f"no channel amax recorded for {layer!r}")
    stack = np.stack([r.channel_amax[layer] for r in series])
    median = float(np.median(stack))
    peak = np.max(stack[-recent:], axis=0)
    last = series[-1]
    out = set()
    for i in np.flatnonzero(peak > amax_ratio_threshold * median):
        st = last.per_channel.get((layer, int(i)))
        if st is not None and abs(st.cos_w1w2) > cos_threshold:
            out.add(int(i))
    return out


# ------------------------------------------------------------------ CSV


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _rows(record: DiagnosticsRecord):
    it = record.iteration
    blank = [""] * 3
    for layer in sorted(set(record.per_layer_amax) | {l for l, _ in record.per_channel}):
        if layer in record.per_layer_amax:
            yield [it, layer, "amax", -1, *blank, _fmt(record.per_layer_amax[layer]), "", "", "", "",
                   int(layer in record.diverged)]
        chans = sorted(c for l, c in record.per_channel if l == layer)
        camax = record.channel_amax.get(layer)
        for c in chans:
            st = record.per_channel[(layer, c)]
            a = _fmt(camax[c]) if camax is not None and c < camax.size else ""
            yield [it, layer, "channel", c, _fmt(st.cos_w1w2), _fmt(st.norm_w1), _fmt(st.norm_w2),
                   a, "", "", "", "", 0]
    for tag in sorted(record.tensors):
        t = record.tensors[tag]
        layer, _, name = tag.rpartition(".")
        yield [it, layer, name, -1, *blank, _fmt(t.amax), _fmt(t.amax_post), _fmt(t.scale),
               t.saturations, t.underflows, int(tag in record.diverged)]
    for tag in sorted(record.diverged - set(record.tensors) - set(record.per_layer_amax)):
        layer, _, name = tag.rpartition(".")
        yield [it, layer or tag, name, -1, *blank, "", "", "", "", "", 1]


def write_diagnostics_csv(records: list[DiagnosticsRecord], path) -> Path:
    """One row per (iteration, tensor) and per (iteration, layer, channel).

    Columns are ``CSV_COLUMNS``; ``channel`` is -1 on tensor-level rows and
    floats are written with ``repr`` so they round-trip exactly.
    """
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerows(_rows(r))
    return path


def write_histogram_csv(hist: MagnitudeHistogram, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("ln_lo", "ln_hi", "count"))
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))
    return path
