"""Checkpoint files: magic, a length-prefixed JSON header, then raw float64
arrays in header order (little endian)."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from partialseg.errors import CorruptFile, MissingCheckpoint, VersionMismatch

MAGIC = b"PSEGCKPT"
VERSION = 1


def label_space_hash(names) -> str:
    return hashlib.sha256("\x1f".join(names).encode()).hexdigest()[:16]


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = dict(header)
    header["format_version"] = VERSION
    header["arrays"] = [{"name": k, "shape": list(np.shape(arrays[k]))} for k in names]
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CorruptFile(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n])
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: bad header") from exc
    if header.get("format_version") != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {header.get('format_version')}")
    arrays = {}
    pos = 16 + n
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + 8 * count
        if end > len(raw):
            raise CorruptFile(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        pos = end
    if pos != len(raw):
        raise CorruptFile(f"{path}: trailing bytes")
    return header, arrays
