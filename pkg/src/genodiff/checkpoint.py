"""The "G2PD" checkpoint container.

Layout (all integers little-endian)::

    magic        4 bytes  b"G2PD"
    version      u32      FORMAT_VERSION
    meta_len     u32      length of the metadata block
    metadata     bytes    UTF-8 JSON, keys sorted, no whitespace
    n_tensors    u32
    n_tensors x:
        path_len u16, path (UTF-8)
        dtype    u8       index into DTYPES
        ndim     u8,  dims u32 x ndim
        nbytes   u64
        crc32    u32      zlib.crc32 of the payload
        payload  bytes    C-order little-endian values

Tensors are written in ascending path order.
"""

from __future__ import annotations

import io
import json
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"G2PD"
FORMAT_VERSION = 1
DTYPES = ("<f4", "<f8", "<i8", "<i4", "|u1")


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointContainer:
    metadata: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def subtree(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.``, with the prefix stripped."""
        p = prefix.rstrip(".") + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def load_into(self, module: torch.nn.Module, prefix: str) -> None:
        state = {k: torch.from_numpy(v.copy()) for k, v in self.subtree(prefix).items()}
        module.load_state_dict(state, strict=True)


def creation_time() -> int:
    """Seconds since the epoch, pinned by SOURCE_DATE_EPOCH for reproducible builds."""
    return int(os.environ.get("SOURCE_DATE_EPOCH", time.time()))


def module_tensors(modules: Mapping[str, torch.nn.Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            out[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    return out


def encode(ckpt: CheckpointContainer) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for path in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[path])
        code = np.dtype(arr.dtype).newbyteorder("<").str if arr.dtype.itemsize > 1 else "|u1"
        if code not in DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {path!r}")
        payload = np.ascontiguousarray(arr, dtype=code).tobytes()
        pb = path.encode()
        buf.write(struct.pack("<H", len(pb)))
        buf.write(pb)
        buf.write(struct.pack("<BB", DTYPES.index(code), arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        buf.write(payload)
    return buf.getvalue()


def decode(data: bytes, prefix: str | None = None) -> CheckpointContainer:
    """Parse a container; with ``prefix`` only that subtree's payloads are materialized."""
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a G2PD checkpoint")
    version, meta_len = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    metadata = json.loads(bytes(take(meta_len, "metadata")).decode())
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (plen,) = struct.unpack("<H", take(2, "tensor path"))
        path = bytes(take(plen, "tensor path")).decode()
        code, ndim = struct.unpack("<BB", take(2, f"header of {path!r}"))
        if code >= len(DTYPES):
            raise CheckpointError(f"unknown dtype code {code} for tensor {path!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {path!r}"))
        nbytes, crc = struct.unpack("<QI", take(12, f"header of {path!r}"))
        payload = bytes(take(nbytes, f"payload of {path!r}"))
        if prefix is not None and not path.startswith(prefix):
            continue
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in tensor {path!r}")
        dtype = np.dtype(DTYPES[code])
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"payload size of tensor {path!r} does not match its shape")
        tensors[path] = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return CheckpointContainer(metadata, tensors)


def save_checkpoint(path, ckpt: CheckpointContainer) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path, prefix: str | None = None) -> CheckpointContainer:
    return decode(Path(path).read_bytes(), prefix)
