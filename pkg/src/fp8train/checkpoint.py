"""Little-endian binary checkpoints of named arrays and optimizer state.

Layout::

    b"FP8CKPT\\0"  u32 version  u32 flags (bit 0: folded)  u32 record count
    per record:   u16 name length, UTF-8 name, u8 dtype tag, u8 ndim,
                  u64 shape[ndim], u64 payload length, payload bytes

Optimizer moments are stored as their codes plus scale; names are
``opt/{m|v}/{param}/{FORMAT}/{codes|scale|values}`` and ``opt/step``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fp8train.numerics import get_format
from fp8train.optimizer import Fp8AdamState, MomentStats, StoredMoment
from fp8train.scaling import ScaledTensor

MAGIC = b"FP8CKPT\0"
VERSION = 1
FLAG_FOLDED = 1

_DTYPES = {1: "<f8", 2: "<u1", 3: "<u2", 4: "<i8"}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    folded: bool = False


def _pack(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    elif arr.dtype == np.uint8:
        arr = arr.astype("<u1")
    elif arr.dtype == np.uint16:
        arr = arr.astype("<u2")
    else:
        arr = arr.astype("<i8")
    tag = _TAGS[arr.dtype]
    raw = name.encode()
    payload = np.ascontiguousarray(arr).tobytes()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<Q", len(payload)) + payload


def _state_arrays(state: Fp8AdamState) -> dict[str, np.ndarray]:
    out = {"opt/step": np.array(state.step, dtype=np.int64)}
    for which, moments in (("m", state.m), ("v", state.v)):
        for pname in sorted(moments):
            sm = moments[pname]
            base = f"opt/{which}/{pname}/{sm.format}"
            if isinstance(sm.data, ScaledTensor):
                width = np.uint8 if sm.data.format.width == 8 else np.uint16
                out[f"{base}/codes"] = sm.data.codes.astype(width)
                out[f"{base}/scale"] = np.atleast_1d(np.asarray(sm.data.scale, dtype=np.float64))
            else:
                out[f"{base}/values"] = sm.data
    return out


def save_checkpoint(path, params: dict[str, np.ndarray], opt_state: Fp8AdamState | None = None,
                    folded: bool = False) -> Path:
    arrays = {f"param/{k}": v for k, v in sorted(params.items())}
    if opt_state is not None:
        arrays.update(_state_arrays(opt_state))
    body = b"".join(_pack(k, v) for k, v in arrays.items())
    path = Path(path)
    path.write_bytes(MAGIC + struct.pack("<III", VERSION, FLAG_FOLDED if folded else 0, len(arrays)) + body)
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    off = len(MAGIC)
    if len(buf) < off + 12:
        raise CheckpointError("truncated checkpoint header")
    version, flags, n = struct.unpack_from("<III", buf, off)
    off += 12
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            tag, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            (size,) = struct.unpack_from("<Q", buf, off)
            off += 8
            if off + size > len(buf):
                raise CheckpointError(f"truncated record {name!r}")
            arrays[name] = np.frombuffer(buf, _DTYPES[tag], count=size // np.dtype(_DTYPES[tag]).itemsize,
                                         offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return Checkpoint(arrays, bool(flags & FLAG_FOLDED))


def params_of(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {k[len("param/"):]: v for k, v in ckpt.arrays.items() if k.startswith("param/")}


def optimizer_state_of(ckpt: Checkpoint) -> Fp8AdamState | None:
    if "opt/step" not in ckpt.arrays:
        return None
    state = Fp8AdamState(step=int(ckpt.arrays["opt/step"]))
    for key, arr in ckpt.arrays.items():
        parts = key.split("/")
        if len(parts) != 5 or parts[0] != "opt" or parts[4] == "scale":
            continue
        _, which, pname, fmt, kind = parts
        if kind == "values":
            data = arr.astype(np.float64)
        else:
            scale = ckpt.arrays[f"opt/{which}/{pname}/{fmt}/scale"]
            s = float(scale[0]) if scale.size == 1 else scale
            data = ScaledTensor(arr.astype(np.uint16), s, get_format(fmt))
        getattr(state, which)[pname] = StoredMoment(fmt, data)
        getattr(state, f"{which}_stats")[pname] = MomentStats()
    return state
