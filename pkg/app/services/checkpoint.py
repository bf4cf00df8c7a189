"""
app/services/checkpoint.py

Binary ParamMap files (``.ftck``), little-endian throughout:

    b"FTCK"  u32 version (=1)  u32 tensor count
    per tensor, in name order:
        u16 name length, UTF-8 name, u8 ndim, ndim × u32 dims,
        prod(dims) × f64 row-major data

Reading is strict: wrong magic or version, truncated data and trailing bytes
all raise ``CheckpointCorruptError``; a partial map is never returned.
"""

import math
import os
import struct
from pathlib import Path

import numpy as np

from app.core.logging import get_logger
from app.services.params import ParamMap
from app.services.tensor import TensorError

logger = get_logger(__name__)

MAGIC = b"FTCK"
VERSION = 1
SUFFIX = ".ftck"

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<B")
_F64 = np.dtype("<f8")


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""

    pass


class CheckpointCorruptError(CheckpointError):
    pass


def encode(params: ParamMap) -> bytes:
    chunks = [_HEADER.pack(MAGIC, VERSION, len(params))]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long to store: {name[:40]}...")
        if tensor.ndim > 0xFF:
            raise CheckpointError(f"{name}: {tensor.ndim} dimensions exceed the format limit")
        chunks.append(_NAME_LEN.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_NDIM.pack(tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype=_F64).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointCorruptError(
                f"{self.source}: truncated while reading {what} (need {size} bytes at offset {self.offset})"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))


def decode(data: bytes, source: str = "<bytes>") -> ParamMap:
    reader = _Reader(data, source)
    magic, version, count = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointCorruptError(f"{source}: unsupported version {version}")

    entries: dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack(_NAME_LEN, f"name length of tensor {index}")
        try:
            name = reader.take(name_len, f"name of tensor {index}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"{source}: tensor {index} name is not UTF-8") from exc
        if name in entries:
            raise CheckpointCorruptError(f"{source}: duplicate tensor {name!r}")
        (ndim,) = reader.unpack(_NDIM, f"ndim of {name}")
        dims = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, f"dims of {name}"))
        nbytes = math.prod(dims) * _F64.itemsize
        if nbytes > len(data) - reader.offset:
            raise CheckpointCorruptError(
                f"{source}: {name} claims shape {dims} ({nbytes} bytes), only {len(data) - reader.offset} left"
            )
        raw = reader.take(nbytes, f"data of {name}")
        try:
            entries[name] = np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(dims)
        except ValueError as exc:
            raise CheckpointCorruptError(f"{source}: {name} data does not fit shape {dims}") from exc

    if reader.offset != len(data):
        raise CheckpointCorruptError(f"{source}: {len(data) - reader.offset} trailing bytes")
    try:
        return ParamMap(entries)
    except (ValueError, TensorError) as exc:
        raise CheckpointCorruptError(f"{source}: {exc}") from exc


def write_checkpoint(path: Path, params: ParamMap) -> Path:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    path = Path(path)
    payload = encode(params)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.debug("checkpoint_written", path=str(path), tensors=len(params), bytes=len(payload))
    return path


def read_checkpoint(path: Path) -> ParamMap:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data, source=str(path))


def step_filename(step: int) -> str:
    return f"step_{step:06d}{SUFFIX}"


def list_trajectory(directory: Path) -> list[tuple[int, Path]]:
    """``step_XXXXXX.ftck`` files of one run directory, ordered by step."""
    found = []
    for path in Path(directory).glob(f"step_*{SUFFIX}"):
        digits = path.stem.removeprefix("step_")
        if digits.isdigit():
            found.append((int(digits), path))
    return sorted(found)
