"""Binary container for checkpoints, cached datasets, and feature dumps.

Layout (all multi-byte integers little-endian):

    bytes 0..7    magic ``NHLCKPT1``
    bytes 8..11   uint32 header length L
    bytes 12..12+L  UTF-8 JSON header (sorted keys, compact separators)
    remainder     raw tensor payloads, concatenated in directory order

The header carries ``version``, ``kind`` (model | dataset | features), an
optional ``descriptor``, free-form ``meta``, and ``tensors``: a list of
``{name, shape, dtype, kind, offset}`` entries whose offsets are relative
to the payload start.  Dtypes are numpy codes ``<f4`` / ``<i8``.  Saving a
loaded file reproduces it byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"NHLCKPT1"
_ALLOWED_DTYPES = {"<f4", "<i8"}


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Container:
    """In-memory form of a container file."""

    kind: str
    descriptor: dict | None = None
    meta: dict = field(default_factory=dict)
    tensors: list[tuple[str, str, np.ndarray]] = field(default_factory=list)  # (name, tkind, data)
    version: int = 1

    def tensor_map(self) -> dict[str, np.ndarray]:
        return {name: data for name, _, data in self.tensors}


def save_container(path, c: Container) -> None:
    directory = []
    offset = 0
    payloads = []
    seen = set()
    for name, tkind, data in c.tensors:
        if name in seen:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        dtype = "<i8" if data.dtype == np.int64 else "<f4"
        raw = np.ascontiguousarray(data, dtype=np.dtype(dtype)).tobytes()
        directory.append(
            {"name": name, "shape": list(data.shape), "dtype": dtype, "kind": tkind, "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "version": c.version,
        "kind": c.kind,
        "meta": c.meta,
        "tensors": directory,
    }
    if c.descriptor is not None:
        header["descriptor"] = c.descriptor
    blob = _canon_json(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_container(path) -> Container:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a container file")
    hlen = int.from_bytes(data[8:12], "little")
    if 12 + hlen > len(data):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}") from e
    payload = data[12 + hlen :]
    tensors = []
    for entry in header.get("tensors", []):
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise CheckpointFormatError(f"{path}: unsupported dtype {dtype!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(dtype)).reshape(shape)
        tensors.append((entry["name"], entry.get("kind", "param"), arr.copy()))
    return Container(
        kind=header.get("kind", "model"),
        descriptor=header.get("descriptor"),
        meta=header.get("meta", {}),
        tensors=tensors,
        version=header.get("version", 1),
    )
