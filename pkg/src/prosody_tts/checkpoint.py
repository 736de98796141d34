"""Binary checkpoints: ``PBTN`` magic, version, then CRC-framed chunks.

Every chunk is ``u32 length | payload | u32 crc32(payload)``, little-endian.
Chunk order: model config text, norm stats, tensor count, one chunk per
parameter tensor (sorted by name), train config text, step, Adam flag and,
when present, Adam step plus first/second moment tensors.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, format_section, section_from_text
from .errors import IntegrityError, VersionError
from .model import ModelParams
from .prosody import NormStats
from .tensor import Tensor
from .trainer import AdamState

MAGIC = b"PBTN"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    train_config: TrainConfig
    norm_stats: NormStats | None = None
    step: int = 0
    adam: AdamState | None = None


def _tensor_payload(name: str, array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode()
    head = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _parse_tensor(payload: bytes, offset: int) -> tuple[str, np.ndarray]:
    try:
        (n,) = struct.unpack_from("<H", payload, 0)
        name = payload[2:2 + n].decode()
        (ndim,) = struct.unpack_from("<B", payload, 2 + n)
        shape = struct.unpack_from(f"<{ndim}I", payload, 3 + n)
    except (struct.error, UnicodeDecodeError):
        raise IntegrityError("malformed tensor header", offset) from None
    start = 3 + n + 4 * ndim
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) - start != expected:
        raise IntegrityError(f"tensor {name!r}: {len(payload) - start} payload bytes, shape needs {expected}", offset)
    return name, np.frombuffer(payload, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


class _Writer:
    def __init__(self):
        self.parts = [MAGIC, struct.pack("<I", VERSION)]

    def chunk(self, payload: bytes) -> None:
        self.parts.append(struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def chunk(self) -> tuple[bytes, int]:
        start = self.pos
        if start + 4 > len(self.blob):
            raise IntegrityError("truncated chunk length", start)
        (n,) = struct.unpack_from("<I", self.blob, start)
        end = start + 4 + n
        if end + 4 > len(self.blob):
            raise IntegrityError(f"chunk of {n} bytes runs past end of file", start)
        payload = self.blob[start + 4:end]
        (crc,) = struct.unpack_from("<I", self.blob, end)
        if zlib.crc32(payload) != crc:
            raise IntegrityError("checksum mismatch", start)
        self.pos = end + 4
        return payload, start

    def u64(self) -> int:
        payload, offset = self.chunk()
        if len(payload) != 8:
            raise IntegrityError("expected an 8-byte integer", offset)
        return struct.unpack("<Q", payload)[0]

    def text(self) -> str:
        payload, offset = self.chunk()
        try:
            return payload.decode()
        except UnicodeDecodeError:
            raise IntegrityError("config text is not utf-8", offset) from None


def dumps(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.chunk(format_section(ckpt.model_config).encode())
    stats = ckpt.norm_stats
    w.chunk(b"" if stats is None else struct.pack("<6d", *stats.as_tuple()))
    names = ckpt.params.names()
    w.chunk(struct.pack("<Q", len(names)))
    for name in names:
        w.chunk(_tensor_payload(name, ckpt.params[name].data))
    w.chunk(format_section(ckpt.train_config).encode())
    w.chunk(struct.pack("<Q", ckpt.step))
    adam = ckpt.adam
    w.chunk(struct.pack("<B", adam is not None))
    if adam is not None:
        w.chunk(struct.pack("<Q", adam.step))
        moment_names = sorted(adam.m)
        w.chunk(struct.pack("<Q", len(moment_names)))
        for name in moment_names:
            w.chunk(_tensor_payload(name, adam.m[name]))
            w.chunk(_tensor_payload(name, adam.v[name]))
    return w.bytes()


def loads(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise IntegrityError(f"not a checkpoint: magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 8:
        raise IntegrityError("truncated header", len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    r = _Reader(blob)
    r.pos = 8
    model_config = section_from_text(ModelConfig, r.text())
    payload, offset = r.chunk()
    if payload and len(payload) != 48:
        raise IntegrityError("norm stats chunk must hold 6 doubles", offset)
    stats = NormStats(*struct.unpack("<6d", payload)) if payload else None
    params = ModelParams()
    for _ in range(r.u64()):
        payload, offset = r.chunk()
        name, arr = _parse_tensor(payload, offset)
        params.add(name, Tensor(arr))
    train_config = section_from_text(TrainConfig, r.text())
    step = r.u64()
    payload, offset = r.chunk()
    if payload not in (b"\x00", b"\x01"):
        raise IntegrityError("bad optimizer flag", offset)
    adam = None
    if payload == b"\x01":
        adam = AdamState(r.u64())
        for _ in range(r.u64()):
            name, m = _parse_tensor(*r.chunk())
            name_v, v = _parse_tensor(*r.chunk())
            adam.m[name], adam.v[name_v] = m, v
    if r.pos != len(blob):
        raise IntegrityError(f"{len(blob) - r.pos} trailing bytes", r.pos)
    return Checkpoint(model_config, params, train_config, stats, int(step), adam)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
