"""
engines/checkpoint.py — QLIP Lab
Shared binary checkpoint format ("QLPB").

Layout (all little-endian):
  magic  b"QLPB"
  u16    format version
  repeated records until EOF:
    u16 name length | UTF-8 name | u8 dtype code (0=f32, 1=f64, 2=i32)
    u8 rank | rank × u32 dims | raw payload

The config hash travels as the record "meta/config_hash" (i32 code points).
"""

from __future__ import annotations

import logging
import os
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from errors import ContractViolation

logger = logging.getLogger(__name__)

MAGIC = b"QLPB"
FORMAT_VERSION = 1
HASH_RECORD = "meta/config_hash"

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("=")
    if key not in _CODES:
        raise ContractViolation(f"unsupported checkpoint dtype {arr.dtype}")
    return _CODES[key]


def encode_text(text: str) -> np.ndarray:
    return np.array([ord(c) for c in text], dtype=np.int32)


def decode_text(arr: np.ndarray) -> str:
    return "".join(chr(int(c)) for c in np.asarray(arr).reshape(-1))


def save_checkpoint(path, records: Mapping[str, np.ndarray], config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = dict(records)
    if config_hash is not None:
        items[HASH_RECORD] = encode_text(config_hash)

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        for name, value in items.items():
            arr = np.asarray(value)
            if arr.dtype.kind == "f" and arr.dtype.itemsize not in (4, 8):
                arr = arr.astype(np.float64)
            elif arr.dtype.kind in "iub":
                arr = arr.astype(np.int32)
            code = _dtype_code(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    os.replace(tmp, path)
    logger.debug(f"[checkpoint] wrote {len(items)} records → {path}")
    return path


def load_checkpoint(path) -> tuple[dict, Optional[str]]:
    """Returns (records, config_hash or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()

    if blob[:4] != MAGIC:
        raise ContractViolation(f"{path} is not a QLPB checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version}")

    offset = 6
    records: dict[str, np.ndarray] = {}
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset: offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ContractViolation(f"{path}: truncated record header at byte {offset}") from exc
        offset += 4 * rank
        if code not in _DTYPES:
            raise ContractViolation(f"{path}: unknown dtype code {code} in record '{name}'")
        dtype = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise ContractViolation(f"{path}: record '{name}' needs {nbytes} bytes, only {len(blob) - offset} left")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)
        records[name] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes

    config_hash = None
    if HASH_RECORD in records:
        config_hash = decode_text(records.pop(HASH_RECORD))
    return records, config_hash
