"""Binary container shared by dictionaries, signal stacks, maps and checkpoints.

Layout::

    4 bytes   magic (e.g. b"MRFD")
    4 bytes   little-endian uint32 header length H
    H bytes   UTF-8 JSON header, with a "planes" list of {name, shape}
    ...       each plane as raw little-endian float32, row-major, in header order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np


class ContainerError(ValueError):
    pass


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def digest(doc) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_container(path, magic: bytes, header: dict, planes: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ContainerError("magic must be 4 bytes")
    header = dict(header)
    header["planes"] = [{"name": k, "shape": list(np.shape(v))} for k, v in planes.items()]
    raw = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for v in planes.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise ContainerError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    (n,) = struct.unpack("<I", buf[4:8])
    header = json.loads(buf[8 : 8 + n].decode())
    offset = 8 + n
    planes = {}
    for spec in header["planes"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        planes[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(buf):
        raise ContainerError(f"{path}: {len(buf) - offset} trailing bytes")
    return header, planes
