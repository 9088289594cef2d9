"""Byte-level corpora, deterministic batching and synthetic datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fp8train.swiglu import SwiGluBlock, swish

VOCAB = 256


class DataError(ValueError):
    pass


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, step) pair."""
    return np.random.default_rng([seed, stream, step])


# ----------------------------------------------------------------- text


def load_corpus(path) -> np.ndarray:
    """Bytes of ``path`` as token ids in [0, 255]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise DataError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def synthetic_text(seed: int, n_bytes: int, n_words: int = 400) -> bytes:
    """Pseudo-English drawn from a random word-bigram chain.

    Word frequencies follow a Zipf law and each word has a handful of likely
    successors, so the text has learnable structure at the byte level.
    """
    rng = np.random.default_rng(seed)
    letters = np.frombuffer(b"etaoinshrdlcumwfgypbvkjxqz", dtype=np.uint8)
    freq = 1.0 / np.arange(1, letters.size + 1)
    words = []
    for _ in range(n_words):
        k = int(rng.integers(2, 8))
        words.append(bytes(rng.choice(letters, size=k, p=freq / freq.sum())))
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    succ = rng.choice(n_words, size=(n_words, 4), p=zipf)
    out = bytearray()
    w = 0
    while len(out) < n_bytes:
        out += words[w]
        r = rng.random()
        if r < 0.08:
            out += b". "
            w = int(rng.choice(n_words, p=zipf))
        else:
            out += b" "
            w = int(succ[w, int(rng.integers(4))]) if r < 0.85 else int(rng.choice(n_words, p=zipf))
    return bytes(out[:n_bytes])


@dataclass
class ByteBatcher:
    """Random windows of ``seq + 1`` tokens; batch ``k`` depends only on (seed, k)."""

    tokens: np.ndarray
    batch: int
    seq: int
    seed: int

    def __post_init__(self):
        if self.tokens.size < self.seq + 2:
            raise DataError(f"corpus of {self.tokens.size} bytes is shorter than one window")

    def windows(self, step: int) -> np.ndarray:
        starts = step_rng(self.seed, step, 1).integers(0, self.tokens.size - self.seq, size=self.batch)
        return self.tokens[starts[:, None] + np.arange(self.seq + 1)]

    def __call__(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """``(inputs, targets)``, each ``[batch x seq]``; targets are inputs shifted by one."""
        w = self.windows(step)
        return w[:, :-1], w[:, 1:]


# ------------------------------------------------------------ synthetic


@dataclass
class RegressionData:
    x: np.ndarray
    y: np.ndarray
    teacher: SwiGluBlock

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class SpikeStream:
    """Stationary Gaussian batches with a one-off ``x k`` outlier.

    ``batch(it)`` draws iteration ``it``'s inputs. ``inject(t, it)`` returns
    ``t`` unchanged except on ``spike_iter``, where its largest-magnitude
    element is multiplied by ``factor``.
    """

    seed: int
    tokens: int
    d: int
    d_out: int
    spike_iter: int
    factor: float
    teacher: SwiGluBlock

    def batch(self, it: int) -> tuple[np.ndarray, np.ndarray]:
        x = step_rng(self.seed, it, 2).standard_normal((self.tokens, self.d))
        return x, teacher_forward(x, self.teacher)

    def inject(self, t: np.ndarray, it: int) -> np.ndarray:
        if it != self.spike_iter:
            return t
        out = np.array(t, dtype=np.float64, copy=True)
        i = np.unravel_index(np.argmax(np.abs(out)), out.shape)
        out[i] *= self.factor
        return out


def teacher_forward(x: np.ndarray, t: SwiGluBlock) -> np.ndarray:
    return ((x @ t.w1) * swish(x @ t.w2)) @ t.w3


def synthetic_dataset(seed: int, recipe: dict):
    """``recipe["kind"]`` selects ``regression`` or ``spike_stream``.

    regression: ``n``, ``d``, ``d_out``, ``teacher_hidden``, ``input_scale``,
    ``input_offset``, ``noise``. Inputs are ``input_scale * (offset * u + r * z)``
    with a fixed random unit vector ``u``, Gaussian ``z`` and a log-normal
    per-sample radius ``r``, so ``|w2 . x|`` spans several orders of magnitude
    and keeps its sign along ``u``. Targets are scaled to unit variance.

    spike_stream: ``tokens``, ``d``, ``d_out``, ``spike_iter``, ``factor``.
    """
    kind = recipe.get("kind")
    rng = np.random.default_rng([seed, 7])
    if kind == "regression":
        n, d, d_out = recipe["n"], recipe["d"], recipe.get("d_out", 1)
        teacher = SwiGluBlock.init(rng, d, recipe.get("teacher_hidden", 8), d_out)
        if recipe.get("teacher_tied"):
            teacher.w1[...] = teacher.w2
            teacher.w3[...] = np.abs(teacher.w3)
        radius = np.exp(0.5 * rng.standard_normal((n, 1)))
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        z = radius * rng.standard_normal((n, d))
        k = recipe.get("clusters", 0)
        if k:
            centers = rng.standard_normal((k, d))
            z = centers[rng.integers(0, k, size=n)] + recipe.get("cluster_spread", 0.1) * z
        x = recipe.get("input_scale", 1.0) * (recipe.get("input_offset", 0.0) * u + z)
        y = teacher_forward(x, teacher)
        sd = float(np.std(y))
        if sd > 0:
            y = y / sd
        noise = recipe.get("noise", 0.0)
        if noise:
            y = y + noise * rng.standard_normal(y.shape)
        return RegressionData(x, y, teacher)
    if kind == "spike_stream":
        d, d_out = recipe["d"], recipe.get("d_out", recipe["d"])
        teacher = SwiGluBlock.init(rng, d, recipe.get("teacher_hidden", 8), d_out)
        return SpikeStream(seed, recipe["tokens"], d, d_out, recipe["spike_iter"], recipe.get("factor", 100.0), teacher)
    raise DataError(f"unknown dataset kind {kind!r}")
