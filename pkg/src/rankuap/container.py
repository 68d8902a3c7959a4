"""On-disk container: JSON header plus little-endian float64 blocks.

Layout: magic line, 8-byte big-endian header length, UTF-8 JSON header, then
the raw '<f8' array blocks in header order. Used for model checkpoints,
landmark models, and perturbation files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RANKUAP-CONTAINER\n"
VERSION = 1


def save_container(path, header, arrays):
    header = dict(header)
    header["container_version"] = VERSION
    header["arrays"] = [list(a.shape) for a in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "big"))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_container(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read container {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: not a rankuap container")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise FormatError(f"{path}: truncated header length")
    hlen = int.from_bytes(raw[off : off + 8], "big")
    off += 8
    if len(raw) < off + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    version = header.get("container_version")
    if version != VERSION:
        raise FormatError(f"{path}: container version {version}, expected {VERSION}")
    arrays = []
    for shape in header.get("arrays", []):
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < off + nbytes:
            raise FormatError(f"{path}: truncated data block (expected {nbytes} bytes)")
        arrays.append(np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy())
        off += nbytes
    return header, arrays
