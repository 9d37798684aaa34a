"""Bit-exact binary model files.

Layout (all integers little-endian):

    magic "FMTD" | version u32 | arch-descriptor u32 length + UTF-8 |
    tensor count u32 | per tensor: name u32 length + UTF-8, dtype u8
    (0 = float32), rank u8, rank * u32 dims, raw little-endian payload |
    CRC32 u32 over all preceding bytes

Saving the same model twice yields identical bytes, so file hashes identify
models.  Loading verifies magic, version, structure, and checksum, raising
a distinct error for each failure mode.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .arch import ArchitectureSpec
from .model import ModelParams

MAGIC = b"FMTD"
VERSION = 1
_DTYPE_F32 = 0


class ModelFormatError(ValueError):
    """Base class for malformed model files."""


class BadMagicError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


def write_tensor_record(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_tensor_record(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    dtype = r.u8()
    if dtype != _DTYPE_F32:
        raise ModelFormatError(f"tensor {name!r}: unknown dtype code {dtype}")
    rank = r.u8()
    dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
    count = 1
    for d in dims:
        count *= d
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    return name, arr.astype(np.float32)


def model_bytes(model: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    desc = model.arch.describe().encode("utf-8")
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(model.tensors)))
    for name, arr in model.tensors.items():
        write_tensor_record(buf, name, arr)
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_model(model: ModelParams, sink) -> None:
    data = model_bytes(model)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        Path(sink).write_bytes(data)


def load_model(source) -> ModelParams:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not an fMTD model")
    if len(data) < 8:
        raise TruncatedError("file ends inside the header")
    declared = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4])
    if declared != actual:
        raise ChecksumError(f"checksum mismatch: stored {declared:#010x}, computed {actual:#010x}")
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version}")
    arch = ArchitectureSpec.parse(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name, arr = read_tensor_record(r)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise ModelFormatError(f"{len(r.data) - r.pos} trailing bytes before checksum")
    return ModelParams(arch, tensors)


def model_hash(model: ModelParams) -> str:
    """SHA-256 of the serialized bytes; stable identifier for provenance records."""
    return hashlib.sha256(model_bytes(model)).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
