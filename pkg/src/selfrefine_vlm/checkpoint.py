"""Binary checkpoint container.

Layout (little-endian)::

    b"SRPM"  u32 version
    u32 n_params,  n_params x tensor record
    u64 optimizer step
    u32 n_moments, n_moments x tensor record   (names "m/<param>", "v/<param>")
    u32 json_len,  json_len bytes of UTF-8 config JSON

    tensor record: u32 name_len, name bytes, u32 ndim, ndim x u32 dims, f64 data
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .data import Vocabulary
from .model import ModelConfig, ModelState
from .numcore import Tensor
from .train import AdamState

MAGIC = b"SRPM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: ModelState
    optimizer: AdamState
    config: dict  # everything else worth keeping: train/refine settings, log pointers


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def _read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
    ndim = _read_u32(fh)
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def dumps(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    params = ckpt.state.params
    fh.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_tensor(fh, name, p.data)
    opt = ckpt.optimizer
    fh.write(struct.pack("<Q", opt.step))
    moments = [(f"m/{k}", v) for k, v in opt.m.items()] + [(f"v/{k}", v) for k, v in opt.v.items()]
    fh.write(struct.pack("<I", len(moments)))
    for name, arr in moments:
        _write_tensor(fh, name, arr)
    meta = {
        "model": ckpt.state.config.to_dict(),
        "vocab": ckpt.state.vocab.tokens,
        "run": ckpt.config,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    return fh.getvalue()


def loads(raw: bytes) -> Checkpoint:
    fh = io.BytesIO(raw)
    if fh.read(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = _read_u32(fh)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        params = dict(_read_tensor(fh) for _ in range(_read_u32(fh)))
        step = struct.unpack("<Q", _read_exact(fh, 8))[0]
        moments = dict(_read_tensor(fh) for _ in range(_read_u32(fh)))
        meta = json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8"))
        config = ModelConfig.from_dict(meta["model"])
        vocab = Vocabulary(meta["vocab"])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    state = ModelState(config, vocab, {k: Tensor(v, requires_grad=True) for k, v in params.items()})
    expected = ModelState.init(config, vocab, 0).params
    for name, ref in expected.items():
        if name not in state.params or state.params[name].shape != ref.shape:
            raise CheckpointError(f"checkpoint parameter {name} missing or misshapen")
    opt = AdamState(
        m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
        v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
        step=int(step),
    )
    return Checkpoint(state, opt, meta.get("run", {}))


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
