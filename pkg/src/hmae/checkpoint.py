"""``HMAE`` checkpoint files.

Layout, little-endian::

    b"HMAE" u32 version u64 body_len
    body:
      u32 len + ViTConfig JSON
      u64 training step
      u32 len + state JSON (RNG seed, optimizer scalars)
      u32 n_tensors
      n_tensors x ( u16 name_len, name, u8 dtype (1 = f32), u8 rank, rank x u32 dims, f32 payload )
    u32 crc32(body)

Writes go to a temporary file that is renamed into place, and loading checks
magic, declared length and CRC, so a partially written file never loads.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .optim import AdamWState
from .vit import MaeModel, ViTConfig

MAGIC = b"HMAE"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ViTConfig
    tensors: dict  # name -> float32 array, insertion ordered
    step: int = 0
    state: dict = field(default_factory=dict)


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    body = [
        _blob(json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")),
        struct.pack("<Q", ckpt.step),
        _blob(json.dumps(ckpt.state, sort_keys=True).encode("utf-8")),
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        body.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, a.ndim))
        body.append(struct.pack(f"<{a.ndim}I", *a.shape))
        body.append(a.tobytes())
    body_bytes = b"".join(body)
    return (MAGIC + struct.pack("<IQ", VERSION, len(body_bytes)) + body_bytes
            + struct.pack("<I", zlib.crc32(body_bytes)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an HMAE checkpoint")
    version, body_len = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) != 16 + body_len + 4:
        raise CheckpointError(f"checkpoint length {len(buf)} does not match declared body length {body_len}")
    body = buf[16:16 + body_len]
    (crc,) = struct.unpack_from("<I", buf, 16 + body_len)
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    off = 0

    def blob():
        nonlocal off
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        out = body[off:off + n]
        off += n
        return out

    try:
        config = ViTConfig.from_dict(json.loads(blob()))
        (step,) = struct.unpack_from("<Q", body, off)
        off += 8
        state = json.loads(blob())
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + n].decode("utf-8")
            off += n
            dtype, rank = struct.unpack_from("<BB", body, off)
            off += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).astype(np.float32).reshape(dims)
            off += 4 * size
            tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint body: {exc}") from None
    if off != len(body):
        raise CheckpointError("unexpected trailing data in checkpoint body")
    return Checkpoint(config, tensors, step, state)


def atomic_write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path, expected_config: Optional[ViTConfig] = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_config is not None and expected_config.to_dict() != ckpt.config.to_dict():
        diff = {k: (v, ckpt.config.to_dict()[k]) for k, v in expected_config.to_dict().items()
                if ckpt.config.to_dict()[k] != v}
        raise CheckpointError(f"checkpoint model config differs from the requested one: {diff}")
    return ckpt


# -- model <-> checkpoint ---------------------------------------------------------
def model_checkpoint(model: MaeModel, step: int = 0, optimizer: Optional[AdamWState] = None,
                     seed: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    tensors = {name: p.data for name, p in model.named_parameters()}
    state: dict = {"rng": {"base_seed": int(seed)}}
    if optimizer is not None:
        state["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                              "eps": optimizer.eps, "weight_decay": optimizer.weight_decay, "t": optimizer.t}
        if optimizer.m:
            for (name, _), m, v in zip(model.named_parameters(), optimizer.m, optimizer.v):
                tensors[f"optim.m.{name}"] = m
                tensors[f"optim.v.{name}"] = v
    if extra:
        state.update(extra)
    return Checkpoint(model.config, tensors, step, state)


def restore_model(ckpt: Checkpoint) -> tuple[MaeModel, Optional[AdamWState]]:
    model = MaeModel(ckpt.config, seed=0)
    names = [n for n, _ in model.named_parameters()]
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
    unknown = [n for n in ckpt.tensors if n not in names and not n.startswith("optim.")]
    if unknown:
        raise CheckpointError(f"checkpoint has unexpected tensors {unknown[:5]}")
    opt = None
    o = ckpt.state.get("optimizer")
    if o is not None:
        opt = AdamWState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         weight_decay=o["weight_decay"], t=o["t"])
        if f"optim.m.{names[0]}" in ckpt.tensors:
            opt.m = [ckpt.tensors[f"optim.m.{n}"].copy() for n in names]
            opt.v = [ckpt.tensors[f"optim.v.{n}"].copy() for n in names]
    return model, opt
