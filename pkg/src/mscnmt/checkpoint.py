"""Binary checkpoint format and checkpoint averaging.

Layout (little-endian)::

    b"MSCK"  u32 version
    u64 config length, UTF-8 config text (key=value lines)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u64 dims..., float32 data

Parameters are stored under their own names; Adam moments under
``adam.m/<name>`` and ``adam.v/<name>``.  Step and seed travel in the config
text as ``meta.step`` / ``meta.seed``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import MscConfig, TrainConfig, format_config_text, parse_config_text

MAGIC = b"MSCK"
VERSION = 1
M_PREFIX = "adam.m/"
V_PREFIX = "adam.v/"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: MscConfig
    train_cfg: TrainConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    text = format_config_text(ckpt.cfg, ckpt.train_cfg, {"step": ckpt.step, "seed": ckpt.seed})
    blob = text.encode("utf-8")
    tensors = list(ckpt.params.items())
    tensors += [(M_PREFIX + k, v) for k, v in ckpt.adam_m.items()]
    tensors += [(V_PREFIX + k, v) for k, v in ckpt.adam_v.items()]
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {data[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{source}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    (blob_len,) = take("<Q")
    text = data[pos : pos + blob_len].decode("utf-8")
    pos += blob_len
    cfg, tcfg, extras = parse_config_text(text)
    (count,) = take("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{source}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 4 * n
        if name.startswith(M_PREFIX):
            m[name[len(M_PREFIX):]] = arr
        elif name.startswith(V_PREFIX):
            v[name[len(V_PREFIX):]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    return Checkpoint(cfg, tcfg, params, int(extras.get("step", 0)), int(extras.get("seed", 0)), m, v)


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically (temporary file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".msck")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def average_checkpoints(paths: Sequence[str | Path]) -> Checkpoint:
    """Element-wise mean of the parameters of ``paths``; optimizer state dropped."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    ckpts = [load(p) for p in paths]
    return average_loaded(ckpts, [str(p) for p in paths])


def average_loaded(ckpts: List[Checkpoint], labels: Optional[List[str]] = None) -> Checkpoint:
    labels = labels or [f"#{i}" for i in range(len(ckpts))]
    first = ckpts[0]
    total = {k: np.zeros_like(v) for k, v in first.params.items()}
    for ck, label in zip(ckpts, labels):
        if ck.cfg != first.cfg:
            raise CheckpointError(f"{label}: model config differs from {labels[0]}")
        if set(ck.params) != set(first.params):
            diff = sorted(set(ck.params) ^ set(first.params))
            raise CheckpointError(f"{label}: parameter names differ ({diff[:3]})")
        for k, v in ck.params.items():
            if v.shape != total[k].shape:
                raise CheckpointError(f"{label}: {k} has shape {v.shape}, expected {total[k].shape}")
            total[k] += v
    k = len(ckpts)
    params = {name: arr / k for name, arr in total.items()}
    return Checkpoint(first.cfg, first.train_cfg, params, max(c.step for c in ckpts), first.seed)
