"""Self-describing binary checkpoint files.

Layout: UTF-8 text header lines, terminated by a line ``END``, followed by
the little-endian float64 payload of every declared array in header order.
The header carries a CRC-64/XZ checksum of the payload.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = "STATIONNET-CHECKPOINT"
FORMAT_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    """CRC-64/XZ of ``data``."""
    crc = 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class CheckpointError(ValueError):
    pass


def dumps(meta: Dict[str, str], arrays: Dict[str, np.ndarray]) -> bytes:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    for k, v in meta.items():
        if "\n" in str(v) or ":" in k:
            raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"meta {k}: {v}")
    for name, a in arrays.items():
        dims = " ".join(str(d) for d in np.shape(a))
        lines.append(f"array {name} {np.ndim(a)} {dims}".rstrip())
    lines.append(f"payload_bytes: {len(payload)}")
    lines.append(f"checksum: {crc64(payload):016x}")
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("utf-8") + payload


def loads(blob: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    marker = b"\nEND\n"
    cut = blob.find(marker)
    if cut < 0:
        raise CheckpointError("checkpoint header is not terminated")
    header = blob[:cut].decode("utf-8").split("\n")
    payload = blob[cut + len(marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(first[1]) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {first[1]}")
    meta, shapes, declared, checksum = {}, [], None, None
    for line in header[1:]:
        if line.startswith("meta "):
            k, _, v = line[5:].partition(": ")
            meta[k] = v
        elif line.startswith("array "):
            parts = line.split()
            ndim = int(parts[2])
            shapes.append((parts[1], tuple(int(d) for d in parts[3:3 + ndim])))
        elif line.startswith("payload_bytes: "):
            declared = int(line.split(": ")[1])
        elif line.startswith("checksum: "):
            checksum = int(line.split(": ")[1], 16)
    if declared != len(payload):
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {declared}")
    if checksum != crc64(payload):
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    arrays, offset = {}, 0
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError("declared arrays do not cover the payload")
    return meta, arrays


def save(path, meta: Dict[str, str], arrays: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def load(path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
