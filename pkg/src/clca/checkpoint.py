"""Binary checkpoint reader/writer.

Layout (little-endian)::

    b"CLCA" | u32 version | u64 n + n bytes of canonical JSON
    then, until end of file, one record per array:
    u32 name_len | name (UTF-8) | u32 rank | rank * u64 dims | float32 data

The JSON block holds ``{"model": <ModelConfig>, "meta": {...}}``. Records
cover parameters, batch-norm buffers and, for resumable checkpoints, the
optimizer moments (``optim.m.<name>`` / ``optim.v.<name>``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model.config import ModelConfig, canonical_json
from .model.vit import ClcaViT

MAGIC = b"CLCA"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def model(self, dtype=np.float32) -> ClcaViT:
        m = ClcaViT(self.config, seed=0, dtype=dtype)
        m.load_state_arrays(self.arrays)
        return m

    def optimizer_state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        state = {}
        for name, arr in self.arrays.items():
            if name.startswith("optim.m."):
                key = name[len("optim.m."):]
                state[key] = (arr, self.arrays["optim.v." + key])
        return state


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = canonical_json({"model": ckpt.config.to_dict(), "meta": ckpt.meta}).encode()
    out = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    for name, arr in ckpt.arrays.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, n = struct.unpack_from("<IQ", buf, 4)
    except struct.error as exc:
        raise CheckpointFormatError("truncated checkpoint header") from exc
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 16
    if off + n > len(buf):
        raise CheckpointFormatError("truncated config block")
    header = json.loads(buf[off:off + n].decode())
    off += n
    arrays: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(buf):
                raise CheckpointFormatError(f"record {name!r} runs past end of file")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()
            off += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError("truncated or corrupt record") from exc
    return Checkpoint(ModelConfig.from_dict(header["model"]), arrays, header.get("meta", {}))


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def from_model(model: ClcaViT, meta: dict | None = None, optimizer=None) -> Checkpoint:
    arrays = {name: np.array(arr, dtype=np.float32) for name, arr in model.state_arrays().items()}
    if optimizer is not None:
        for name, (m, v) in optimizer.items():
            arrays["optim.m." + name] = np.array(m, dtype=np.float32)
            arrays["optim.v." + name] = np.array(v, dtype=np.float32)
    return Checkpoint(model.config, arrays, dict(meta or {}))
