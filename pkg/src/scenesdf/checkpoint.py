"""Checkpoint format shared by all networks: a plain-text manifest of named
tensors (name, shape, byte offset) followed by their little-endian float32
payloads."""

from __future__ import annotations

import numpy as np

from .errors import DataError

_HEADER = "SCKPT1"
_END = "END"


def save_checkpoint(path, params: dict, meta: dict | None = None):
    names = sorted(params)
    lines = [_HEADER]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta {k} = {v}")
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} shape={shape} offset={offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    lines.append(_END)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (params as float64 arrays, meta dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    marker = f"\n{_END}\n".encode()
    cut = raw.find(marker)
    if not raw.startswith(_HEADER.encode()) or cut < 0:
        raise DataError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode()
    blob = raw[cut + len(marker):]
    params = {}
    meta = {}
    for line in header.splitlines()[1:]:
        if line.startswith("meta "):
            k, v = line[5:].split(" = ", 1)
            meta[k] = v
        elif line.startswith("tensor "):
            name, shape_s, offset_s = line[7:].rsplit(" ", 2)
            shape = tuple(int(s) for s in shape_s.removeprefix("shape=").split(",") if s)
            offset = int(offset_s.removeprefix("offset="))
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            params[name] = arr.astype(np.float64).reshape(shape)
        else:
            raise DataError(f"{path}: malformed manifest line {line!r}")
    return params, meta
