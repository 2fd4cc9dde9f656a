"""Binary checkpoints.

Layout (little-endian)::

    b"PHCK" | version u32
    fingerprint  (u32 length + ascii)
    stage tag    (u32 length + ascii)
    epoch u32
    header text  (u32 length + utf-8 key=value lines: config and model metadata)
    entry count u32
    per entry: name length u32, name bytes, rank u32, dims u32 * rank, float64 payload

Optimizer momentum buffers are stored as entries named ``opt/<param>`` and
its scalars as rank-0 entries ``opt:<field>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import OptimizerState, ParamStore
from ..errors import (BadMagicError, FingerprintMismatchError, TruncatedPayloadError,
                      VersionMismatchError)
from ..synthdata import parse_key_values
from .config import TrainConfig

MAGIC = b"PHCK"
VERSION = 1
STAGES = ("init", "stage1", "stage2")
_OPT_SCALARS = ("momentum", "weight_decay", "epoch", "total_epochs")


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamStore
    stage: str
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None
    version: int = VERSION

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _blob(data: bytes) -> bytes:
    return _u32(len(data)) + data


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = ckpt.config.to_text() + "".join(f"meta.{k}={v!r}\n" if isinstance(v, float) else f"meta.{k}={v}\n"
                                             for k, v in sorted(ckpt.meta.items()))
    entries = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        entries += [(f"opt/{k}", v) for k, v in opt.momentum_buffers.items()]
        entries += [(f"opt:{k}", np.array(float(getattr(opt, k)))) for k in _OPT_SCALARS]
    parts = [MAGIC, _u32(ckpt.version), _blob(ckpt.fingerprint.encode()), _blob(ckpt.stage.encode()),
             _u32(ckpt.epoch), _blob(header.encode()), _u32(len(entries))]
    for name, value in entries:
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(_blob(name.encode()))
        parts.append(_u32(arr.ndim))
        parts.extend(_u32(d) for d in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(self.path, f"needed {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob_(self) -> bytes:
        return self.take(self.u32())


def from_bytes(blob: bytes, path="<bytes>", config: TrainConfig | None = None,
               force: bool = False) -> Checkpoint:
    r = _Reader(blob, path)
    magic = blob[:4]
    if magic != MAGIC:
        raise BadMagicError(path, magic)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(path, version, VERSION)
    fingerprint = r.blob_().decode()
    stage = r.blob_().decode()
    epoch = r.u32()
    header = parse_key_values(r.blob_().decode())
    count = r.u32()
    params, buffers, scalars = ParamStore(), {}, {}
    for _ in range(count):
        name = r.blob_().decode()
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(dims).astype(np.float64)
        if name.startswith("opt/"):
            buffers[name[4:]] = arr
        elif name.startswith("opt:"):
            scalars[name[4:]] = float(arr.reshape(-1)[0])
        else:
            params.add(name, arr)
    stored = TrainConfig.from_mapping({k: v for k, v in header.items() if not k.startswith("meta.")})
    if stored.fingerprint() != fingerprint:
        raise FingerprintMismatchError(f"{path}: stored fingerprint does not match its own config")
    if config is not None and config.fingerprint() != fingerprint and not force:
        raise FingerprintMismatchError(f"{path}: checkpoint fingerprint {fingerprint} does not match "
                                       f"config fingerprint {config.fingerprint()}")
    meta = {k[5:]: _meta_value(v) for k, v in header.items() if k.startswith("meta.")}
    optimizer = None
    if buffers or scalars:
        optimizer = OptimizerState(buffers, scalars["momentum"], scalars["weight_decay"],
                                   int(scalars["epoch"]), int(scalars["total_epochs"]))
    return Checkpoint(stored, params, stage, epoch, meta, optimizer, version)


def load_checkpoint(path, config: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), path, config, force)


def _meta_value(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw
