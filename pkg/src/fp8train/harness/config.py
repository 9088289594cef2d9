"""Run configuration: validation, text/JSON round-trip and CLI flags."""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from fp8train.nn import PRECISIONS
from fp8train.optimizer import MASTER_FORMATS, MOMENT_FORMATS

TASKS = ("lm", "regression", "spike_stream")
ACTIVATIONS = ("swiglu", "smooth_swiglu", "gelu")
L2_MODES = ("coupled", "decoupled")
REDUCTIONS = ("max", "most_recent")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None  # mandatory; checked in validate()
    task: str = "lm"
    # data
    corpus: str = ""  # empty: generate a synthetic byte corpus
    corpus_bytes: int = 200_000
    batch: int = 32
    context: int = 8
    n_samples: int = 3600
    d_in: int = 4
    d_out: int = 1
    input_scale: float = 3.0
    input_offset: float = 0.0
    teacher_hidden: int = 8
    teacher_tied: bool = False
    clusters: int = 0
    cluster_spread: float = 0.1
    noise: float = 0.0
    # model
    embed: int = 16
    hidden: int = 128
    n_blocks: int = 2
    activation: str = "swiglu"
    # precision
    precision: str = "bf16_baseline"
    quantization: bool = True
    history_len: int = 16
    margin: float = 1.0
    reduction: str = "max"
    channel_margin: float = 1.0
    scale_refresh: int = 1
    workers: int = 1
    # optimizer
    m_format: str = "FP32"
    v_format: str = "FP32"
    master_format: str = "FP32"
    lr: float = 3e-3
    cosine: bool = True
    warmup: int = 0
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mu: float = 0.0
    l2_mode: str = "coupled"
    # schedule
    steps: int = 200
    diag_every: int = 10
    blowup_ratio: float = 1e3  # loss above this multiple of the first loss counts as divergence; 0 disables
    # spike injection
    spike_iter: int = -1
    spike_factor: float = 100.0

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        choices = {
            "task": TASKS, "activation": ACTIVATIONS, "precision": PRECISIONS,
            "l2_mode": L2_MODES, "reduction": REDUCTIONS,
            "m_format": MOMENT_FORMATS, "v_format": MOMENT_FORMATS, "master_format": MASTER_FORMATS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        positive = ("batch", "context", "n_samples", "d_in", "d_out", "embed", "hidden",
                    "n_blocks", "teacher_hidden", "steps", "diag_every", "history_len", "scale_refresh", "workers",
                    "corpus_bytes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 < self.margin <= 1 or not 0 < self.channel_margin <= 1:
            raise ConfigError("margins must be in (0, 1]")
        if self.lr <= 0 or self.eps <= 0 or self.mu < 0:
            raise ConfigError("lr and eps must be > 0 and mu >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.warmup < 0 or not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError("warmup must be >= 0 and min_lr_ratio in [0, 1]")
        if self.blowup_ratio < 0:
            raise ConfigError("blowup_ratio must be >= 0")
        if self.spike_factor <= 0:
            raise ConfigError("spike_factor must be > 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_dict(parse_text(text))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(read_values(path))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_text(text: str) -> dict:
    """Only the keys set in ``key = value`` text, coerced to field types."""
    d = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        d[k] = _coerce(k, v)
    return d


def read_values(path) -> dict:
    """Keys set in a ``key = value`` or JSON config file."""
    text = Path(path).read_text()
    d = json.loads(text) if text.lstrip().startswith("{") else parse_text(text)
    unknown = set(d) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return d


def _coerce(key: str, raw: str):
    t = _TYPES.get(key)
    if t is None:
        raise ConfigError(f"unknown config key {key!r}")
    if "bool" in t:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if "int" in t:
        if raw in ("None", ""):
            return None
        return int(raw)
    if "float" in t:
        return float(raw)
    return raw


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--flag`` per RunConfig field; unset flags keep file/default values."""
    parser.add_argument("--config", help="key = value (or JSON) config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                            type=(lambda s, k=f.name: _coerce(k, s)))


def config_from_args(args: argparse.Namespace, base: dict | None = None, **overrides) -> RunConfig:
    """Resolve ``base`` preset < config file < explicit flags < ``overrides``."""
    d = RunConfig(**(base or {})).to_dict()
    if getattr(args, "config", None):
        d.update(read_values(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    d.update(overrides)
    return RunConfig.from_dict(d).validate()
