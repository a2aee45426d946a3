"""Checkpoint files: a text manifest followed by raw little-endian float32 blobs.

Layout::

    ktx-ckpt v1\n
    meta.<key>=<value>\n            (zero or more)
    name=<id> shape=<d0,d1,...> offset=<byte offset into blob section>\n
    ...
    data\n
    <raw float32 little-endian blobs, concatenated>

Round-trips are bit-exact: arrays are stored and restored as '<f4'.
"""

from __future__ import annotations

import io
import numpy as np

from .tensor import EngineError


class FormatError(EngineError):
    """A checkpoint file is malformed, truncated, or inconsistent."""


_MAGIC = "ktx-ckpt v1"


def _check_name(name: str):
    if not name or any(ch in name for ch in " =\n\r"):
        raise FormatError(f"invalid tensor name {name!r}")


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named float32 arrays plus string metadata."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        _check_name(name)
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else ""
        entries.append(f"name={name} shape={shape} offset={offset}\n")
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        buf = io.StringIO()
        buf.write(_MAGIC + "\n")
        for key, value in (meta or {}).items():
            sval = str(value)
            if "\n" in key or "\n" in sval or "=" in key:
                raise FormatError(f"invalid meta entry {key!r}")
            buf.write(f"meta.{key}={sval}\n")
        for line in entries:
            buf.write(line)
        buf.write("data\n")
        fh.write(buf.getvalue().encode("utf-8"))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors: dict[str, ndarray], meta: dict[str, str])."""
    with open(path, "rb") as fh:
        payload = fh.read()
    head_end = payload.find(b"data\n")
    if head_end < 0:
        raise FormatError(f"{path}: missing data section")
    try:
        header = payload[:head_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: undecodable header") from exc
    blob = payload[head_end + len(b"data\n") :]
    lines = header.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise FormatError(f"{path}: bad magic line")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("meta."):
            key, _, value = line[len("meta.") :].partition("=")
            meta[key] = value
            continue
        fields = dict(part.split("=", 1) for part in line.split(" ") if "=" in part)
        if "name" not in fields or "shape" not in fields or "offset" not in fields:
            raise FormatError(f"{path}: malformed manifest line {line!r}")
        name = fields["name"]
        shape = tuple(int(d) for d in fields["shape"].split(",")) if fields["shape"] else ()
        offset = int(fields["offset"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated blob for tensor {name!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()
    return tensors, meta
