"""Binary embedding store (``HMEB``) and its CSV export.

Layout, little-endian::

    b"HMEB" u32 version u32 count u32 dim
    count x ( u32 id_len, id utf-8, i32 label (-1 = none), u8 split, dim x f32 )

Split codes: 0 none, 1 train, 2 val, 3 test.
"""
from __future__ import annotations

import csv
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .probe import EmbeddingRecord

MAGIC = b"HMEB"
VERSION = 1
SPLIT_CODES = {None: 0, "train": 1, "val": 2, "test": 3}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}


class StoreError(ValueError):
    pass


def encode_embeddings(records: Sequence[EmbeddingRecord]) -> bytes:
    dim = len(records[0].vector) if records else 0
    parts = [MAGIC, struct.pack("<III", VERSION, len(records), dim)]
    for r in records:
        vec = np.asarray(r.vector, dtype="<f4")
        if vec.shape != (dim,):
            raise StoreError(f"record {r.id!r} has dim {vec.shape}, expected {dim}")
        if not np.all(np.isfinite(vec)):
            raise StoreError(f"record {r.id!r} has non-finite values")
        if r.split not in SPLIT_CODES:
            raise StoreError(f"record {r.id!r}: unknown split {r.split!r}")
        rid = r.id.encode("utf-8")
        label = -1 if r.label is None else int(r.label)
        parts.append(struct.pack("<I", len(rid)) + rid + struct.pack("<iB", label, SPLIT_CODES[r.split]))
        parts.append(vec.tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes) -> list[EmbeddingRecord]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise StoreError("not an HMEB embedding store")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise StoreError(f"unsupported HMEB version {version}")
    off = 16
    out = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + n + 5 + 4 * dim > len(buf):
                raise StoreError("truncated HMEB record")
            rid = buf[off:off + n].decode("utf-8")
            off += n
            label, split = struct.unpack_from("<iB", buf, off)
            off += 5
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=off).astype(np.float32)
            off += 4 * dim
            if split not in SPLIT_NAMES:
                raise StoreError(f"record {rid!r}: bad split code {split}")
            out.append(EmbeddingRecord(rid, vec, None if label < 0 else label, SPLIT_NAMES[split]))
    except struct.error as exc:
        raise StoreError(f"truncated HMEB store: {exc}") from None
    if off != len(buf):
        raise StoreError(f"{len(buf) - off} trailing bytes after {count} HMEB records")
    return out


def write_embeddings(records: Sequence[EmbeddingRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(encode_embeddings(records))
    os.replace(tmp, path)
    return path


def read_embeddings(path) -> list[EmbeddingRecord]:
    return decode_embeddings(Path(path).read_bytes())


def export_embeddings_csv(records: Sequence[EmbeddingRecord], path) -> Path:
    path = Path(path)
    dim = len(records[0].vector) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "split"] + [f"e{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.id, "" if r.label is None else r.label, r.split or ""]
                       + [repr(float(v)) for v in r.vector])
    return path
