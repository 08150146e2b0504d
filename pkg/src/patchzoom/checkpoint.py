"""Self-describing binary checkpoints.

Layout (little-endian)::

    magic "PZCKPT\\0\\0" | u16 version | str component | str config-json |
    str metadata-json | u32 n_tensors | n x (str name, u8 dtype, u8 ndim, ndim x u32 dim, payload)

where ``str`` is a u32 byte length followed by UTF-8.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

MAGIC = b"PZCKPT\x00\x00"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable checkpoint, wrong component, or tensor shape mismatch."""


@dataclass
class Checkpoint:
    component: str
    config: dict
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<H", VERSION)]
        out += [_pack_str(self.component), _pack_str(_dumps(self.config)), _pack_str(_dumps(self.metadata))]
        out.append(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
            code = _CODES.get(dt)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            out.append(_pack_str(name))
            out.append(struct.pack("<BB", code, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes, expected_component: str | None = None) -> "Checkpoint":
        reader = _Reader(raw)
        if reader.take(len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("magic: not a checkpoint file")
        (version,) = reader.unpack("<H", "version")
        if version != VERSION:
            raise CheckpointError(f"version: unsupported checkpoint version {version}")
        component = reader.string("component")
        if expected_component is not None and component != expected_component:
            raise CheckpointError(f"component: expected {expected_component!r}, found {component!r}")
        config = json.loads(reader.string("config"))
        metadata = json.loads(reader.string("metadata"))
        (count,) = reader.unpack("<I", "n_tensors")
        tensors = {}
        for _ in range(count):
            name = reader.string("tensor name")
            code, ndim = reader.unpack("<BB", name)
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            shape = reader.unpack(f"<{ndim}I", name)
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            data = reader.take(size, name)
            tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if reader.pos != len(raw):
            raise CheckpointError("trailing bytes after last tensor")
        return cls(component, config, tensors, metadata)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{what}: file truncated")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        return self.take(n, what).decode("utf-8")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_component: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return Checkpoint.from_bytes(raw, expected_component)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def module_tensors(module: nn.Module) -> dict[str, np.ndarray]:
    return {n: t.detach().cpu().numpy().copy() for n, t in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    """Copy tensors into ``module``; every parameter must be present with the right shape."""
    state = module.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CheckpointError(f"{sorted(missing)[0]}: tensor missing from checkpoint")
    extra = set(tensors) - set(state)
    if extra:
        raise CheckpointError(f"{sorted(extra)[0]}: unexpected tensor in checkpoint")
    for name, target in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(target.shape):
            raise CheckpointError(
                f"{name}: shape {tuple(arr.shape)} does not match model shape {tuple(target.shape)}"
            )
    with torch.no_grad():
        for name, target in state.items():
            target.copy_(torch.from_numpy(np.asarray(tensors[name])).to(target.dtype))
