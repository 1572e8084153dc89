"""Portable named-tensor checkpoint archive.

Layout (all integers little-endian)::

    b"MMTRYCK1"                  8-byte magic
    header_len                   uint64
    header                       UTF-8 JSON, header_len bytes
    payload                      raw tensor bytes

The header is ``{"tensors": {name: {"dtype", "shape", "offset", "nbytes",
"crc32"}}, "meta": {...}}``; offsets are relative to the start of the payload,
and every tensor occupies ``[offset, offset + nbytes)``.  ``meta`` carries the
config hash, stage, step and anything else JSON-serializable.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError

MAGIC = b"MMTRYCK1"
_DTYPES = {
    torch.float32: "float32", torch.float64: "float64", torch.float16: "float16",
    torch.int64: "int64", torch.int32: "int32", torch.uint8: "uint8", torch.bool: "bool",
}
_NP = {"float32": "<f4", "float64": "<f8", "float16": "<f2", "int64": "<i8", "int32": "<i4",
       "uint8": "u1", "bool": "?"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointArchive:
    tensors: dict = field(default_factory=dict)   # name -> torch.Tensor
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _to_bytes(t: torch.Tensor, name: str) -> tuple[str, bytes]:
    if t.dtype not in _DTYPES:
        raise CheckpointFormatError(f"unsupported dtype {t.dtype} for {name}", tensor=name)
    kind = _DTYPES[t.dtype]
    arr = t.detach().cpu().contiguous().numpy()
    return kind, arr.astype(_NP[kind], copy=False).tobytes()


def save_checkpoint(path, archive: CheckpointArchive) -> Path:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    entries, chunks, offset = {}, [], 0
    for name in sorted(archive.tensors):
        t = archive.tensors[name]
        kind, data = _to_bytes(t, name)
        entries[name] = {"dtype": kind, "shape": list(t.shape), "offset": offset,
                         "nbytes": len(data), "crc32": zlib.crc32(data)}
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries, "meta": archive.meta}, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> CheckpointArchive:
    """Read and fully validate an archive; any inconsistency raises before anything is returned."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise CheckpointFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        entries, meta = header["tensors"], header["meta"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header ({e})") from e
    payload = memoryview(raw)[16 + hlen:]
    spans = []
    tensors = {}
    for name, e in entries.items():
        try:
            kind, shape, off, nbytes = e["dtype"], [int(s) for s in e["shape"]], int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointFormatError(f"{name}: malformed header entry ({err})", tensor=name) from err
        if kind not in _NP:
            raise CheckpointFormatError(f"{name}: unknown dtype {kind!r}", tensor=name)
        expect = int(np.prod(shape, dtype=np.int64)) * np.dtype(_NP[kind]).itemsize
        if nbytes != expect or off < 0:
            raise CheckpointFormatError(f"{name}: {nbytes} bytes does not fit shape {shape} {kind}", tensor=name)
        if off + nbytes > len(payload):
            raise CheckpointFormatError(f"{name}: bytes [{off}, {off + nbytes}) beyond payload of "
                                        f"{len(payload)} (truncated?)", tensor=name)
        chunk = payload[off:off + nbytes]
        if "crc32" in e and zlib.crc32(chunk) != e["crc32"]:
            raise CheckpointFormatError(f"{name}: checksum mismatch", tensor=name)
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(chunk, dtype=_NP[kind]).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(_TORCH[kind])
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1 and b1 > b0 and a1 > a0:
            raise CheckpointFormatError(f"{bn}: overlaps {an}", tensor=bn)
    return CheckpointArchive(tensors, meta)
