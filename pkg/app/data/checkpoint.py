"""Named-tensor checkpoint files.

Layout (little-endian): magic ``CARZCKPT``, u32 version, u32 tensor count, then
per tensor u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims, f32 payload.
A JSON sidecar next to the checkpoint carries the run configuration.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from app.exceptions import DataError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"CARZCKPT"
VERSION = 1


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, array in state.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise DataError(f"tensor name too long: {name[:40]}...")
        array = np.asarray(array)
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.offset)
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version_at = reader.offset
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=version_at)
    (count,) = reader.unpack("<I", "tensor count")

    state: Dict[str, np.ndarray] = {}
    for i in range(count):
        name_at = reader.offset
        (length,) = reader.unpack("<H", f"name length of tensor {i}")
        try:
            name = reader.take(length, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8", offset=name_at + 2) from None
        if name in state:
            raise FormatError(f"duplicate tensor name {name!r}", offset=name_at)
        (ndim,) = reader.unpack("<B", f"ndim of {name}")
        shape = reader.unpack(f"<{ndim}Q", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.uint64)) if ndim else 1
        payload = reader.take(4 * size, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if reader.offset != len(blob):
        raise FormatError(f"{len(blob) - reader.offset} trailing bytes after last tensor", offset=reader.offset)
    return state


def save_checkpoint(state: Dict[str, np.ndarray], path: Path, config: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(state))
        if config is not None:
            sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from None
    logger.info("saved checkpoint %s (%d tensors)", path, len(state))
    return path


def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(blob)


def load_checkpoint_config(path: Path) -> Dict[str, Any]:
    sidecar = sidecar_path(path)
    try:
        return json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise DataError(f"checkpoint config sidecar not found: {sidecar}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint config sidecar {sidecar} is invalid: {exc}") from None
