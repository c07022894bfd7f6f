"""Binary checkpoint files.

Layout (little-endian)::

    b"BOLT" | u32 version | u64 header length | UTF-8 JSON header
    | float32 payload (tensors back to back) | u32 CRC32 of the payload

The JSON header carries free-form metadata and the tensor manifest
(name, shape, dtype, byte offset into the payload).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"BOLT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(ChecksumError):
    pass


class StructureMismatchError(CheckpointError):
    pass


def write_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4", copy=False))
        if t.is_floating_point() and t.dtype != torch.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {t.dtype}; only float32 is stored")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": manifest, "payload_bytes": offset}).encode()
    payload = b"".join(chunks)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(_CRC.pack(zlib.crc32(payload)))
    tmp.replace(path)
    return path


def read_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a BOLT checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise TruncatedCheckpointError(f"{path}: truncated inside header")
    try:
        header = json.loads(data[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header") from exc
    end = start + header["payload_bytes"]
    if len(data) != end + _CRC.size:
        raise TruncatedCheckpointError(
            f"{path}: expected {end + _CRC.size} bytes, found {len(data)} (checksum cannot be verified)"
        )
    payload = data[start:end]
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(tuple(entry["shape"])).astype(np.float32))
    return tensors, header["meta"]


def load_module_tensors(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy ``prefix``-named tensors into ``module``, naming the first tensor that does not fit."""
    state = module.state_dict()
    for name, dest in state.items():
        key = prefix + name
        if key not in tensors:
            raise StructureMismatchError(f"checkpoint is missing tensor {key!r}")
        if tuple(tensors[key].shape) != tuple(dest.shape):
            raise StructureMismatchError(
                f"tensor {key!r}: checkpoint shape {tuple(tensors[key].shape)} vs model shape {tuple(dest.shape)}"
            )
    extra = [k for k in tensors if k.startswith(prefix) and k[len(prefix):] not in state]
    if extra:
        raise StructureMismatchError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model")
    with torch.no_grad():
        for name, dest in state.items():
            dest.copy_(tensors[prefix + name])


def save_checkpoint(path: str | Path, trainer) -> Path:
    """Persist a ``BoltTrainer``: both branches, optimiser state, step and RNG state."""
    return write_tensors(path, trainer.state_tensors(), trainer.meta())


def load_checkpoint(path: str | Path):
    """Rebuild a ``BoltTrainer`` from ``path``."""
    from .framework import BoltTrainer, ModelConfig, TrainConfig

    tensors, meta = read_tensors(path)
    if meta.get("kind") != "bolt-pretrain":
        raise CheckpointFormatError(f"{path}: not a pretraining checkpoint (kind={meta.get('kind')!r})")
    trainer = BoltTrainer(ModelConfig.from_dict(meta["model"]), TrainConfig(**meta["train"]), seed=meta["seed"])
    trainer.load_state(tensors, meta)
    return trainer
