"""ECGF binary tensor files and the model checkpoint container.

Tensor file layout (little-endian)::

    bytes 0..3   magic b"ECGF"
    u32          version (1: float32 payload, 2: float64 payload)
    u32          rank
    u32 * rank   dims
    payload      row-major IEEE-754 values

Feature files are always version 1. Checkpoints embed version-2 tensors
so that parameters round-trip bit-exactly.

Checkpoint layout::

    bytes 0..3   magic b"ECGC"
    u32          container version (1)
    u32          length of the UTF-8 JSON config, then the JSON bytes
    u32          tensor count
    per tensor:  u32 name length, UTF-8 name, u32 blob length, ECGF blob
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECGF"
CKPT_MAGIC = b"ECGC"
FLOAT32 = 1
FLOAT64 = 2
_U32_MAX = 0xFFFFFFFF
_ITEMSIZE = {FLOAT32: 4, FLOAT64: 8}
_DTYPE = {FLOAT32: "<f4", FLOAT64: "<f8"}


class TensorFormatError(ValueError):
    """Bad magic, unknown version or inconsistent header."""


class TruncatedTensorError(TensorFormatError):
    """Payload shorter (or longer) than the header promises."""


class DimOverflowError(TensorFormatError):
    """A dimension or element count does not fit the format."""


def expected_size(shape, version: int = FLOAT32) -> int:
    return 12 + 4 * len(shape) + _ITEMSIZE[version] * int(np.prod(shape, dtype=np.int64))


def encode_tensor(array, version: int = FLOAT32) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if version not in _ITEMSIZE:
        raise TensorFormatError(f"unsupported tensor version {version}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to store a tensor with non-finite entries")
    for n in arr.shape:
        if n > _U32_MAX:
            raise DimOverflowError(f"dimension {n} exceeds 32 bits")
    header = MAGIC + struct.pack("<II", version, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE[version]).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 12:
        raise TruncatedTensorError(f"tensor blob of {len(blob)} bytes is shorter than the header")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version not in _ITEMSIZE:
        raise TensorFormatError(f"unsupported tensor version {version}")
    head = 12 + 4 * rank
    if len(blob) < head:
        raise TruncatedTensorError(f"header declares rank {rank} but only {len(blob)} bytes present")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    count = 1
    for n in dims:
        count *= n
    nbytes = count * _ITEMSIZE[version]
    if nbytes > 1 << 40:
        raise DimOverflowError(f"dims {dims} describe an implausibly large payload")
    if len(blob) != head + nbytes:
        raise TruncatedTensorError(f"payload is {len(blob) - head} bytes, dims {dims} need {nbytes}")
    data = np.frombuffer(blob, dtype=_DTYPE[version], offset=head, count=count)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, array, version: int = FLOAT32) -> None:
    Path(path).write_bytes(encode_tensor(array, version))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(CKPT_MAGIC + struct.pack("<II", 1, len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(arr, FLOAT64)
        buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(blob)) + blob)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != CKPT_MAGIC:
        raise TensorFormatError(f"bad checkpoint magic {data[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != 1:
            raise TensorFormatError(f"unsupported checkpoint version {version}")
        pos = 12
        config = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (lb,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + lb > len(data):
                raise TruncatedTensorError(f"checkpoint truncated inside tensor {name!r}")
            tensors[name] = decode_tensor(data[pos:pos + lb])
            pos += lb
    except struct.error as exc:
        raise TruncatedTensorError(f"checkpoint truncated: {exc}") from None
    if pos != len(data):
        raise TensorFormatError(f"{len(data) - pos} trailing bytes after checkpoint")
    return config, tensors
