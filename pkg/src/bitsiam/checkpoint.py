"""Native checkpoint container.

File layout::

    8 bytes   magic  b"BITSIAM\\0"
    8 bytes   little-endian uint64 header length H
    H bytes   UTF-8 JSON header
    ...       payload: raw little-endian tensor bytes, contiguous, in header order

Header fields: ``format_version`` (1), ``meta`` (str -> str), ``tensors``
(list of ``{name, dtype, shape, offset, nbytes}``; offsets relative to the
payload start), ``payload_nbytes`` and ``payload_sha256``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from bitsiam.errors import CheckpointError, IntegrityError

MAGIC = b"BITSIAM\0"
FORMAT_VERSION = 1

DTYPES = {
    "float16": np.dtype("<f2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int8": np.dtype("i1"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
    "int64": np.dtype("<i8"),
    "bool": np.dtype("?"),
}


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return name
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


@dataclass
class Checkpoint:
    """Ordered name -> array map plus string metadata."""

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = OrderedDict()
        for name, value in self.tensors.items():
            arr = np.asarray(value)
            _dtype_name(arr)
            tensors[name] = arr
        self.tensors = tensors
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name) -> np.ndarray:
        return self.tensors[name]

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    @classmethod
    def from_state_dict(cls, state: Mapping, meta=None, prefix: str = "") -> "Checkpoint":
        tensors = OrderedDict(
            (prefix + k, v.detach().cpu().contiguous().numpy().copy()) for k, v in state.items()
        )
        return cls(tensors, dict(meta or {}))

    def to_state_dict(self, prefix: str = ""):
        import torch

        return OrderedDict(
            (k[len(prefix):], torch.from_numpy(np.ascontiguousarray(v).copy()))
            for k, v in self.tensors.items()
            if k.startswith(prefix)
        )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    digest = hashlib.sha256()
    for name, arr in ckpt.tensors.items():
        dname = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dname]).tobytes()
        entries.append(
            {"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        digest.update(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": dict(ckpt.meta),
        "tensors": entries,
        "payload_nbytes": offset,
        "payload_sha256": digest.hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)
    return path


def is_native_checkpoint(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC


def load_checkpoint(path, verify_hash: bool = True) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a native checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise IntegrityError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<Q", data[pos: pos + 8])
    pos += 8
    if pos + hlen > len(data):
        raise IntegrityError(f"{path}: header length {hlen} overflows file of {len(data)} bytes")
    try:
        header = json.loads(data[pos: pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: unsupported format_version {header.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    payload = data[pos:]
    if len(payload) != header.get("payload_nbytes"):
        raise IntegrityError(
            f"{path}: payload is {len(payload)} bytes, header declares {header.get('payload_nbytes')}"
        )
    if verify_hash and hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")

    tensors = OrderedDict()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise IntegrityError(f"{path}: duplicate tensor name {name!r}")
        if entry["dtype"] not in DTYPES:
            raise IntegrityError(f"{path}: tensor {name!r} has unknown dtype {entry['dtype']!r}")
        dt = DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if expected != entry["nbytes"]:
            raise IntegrityError(
                f"{path}: tensor {name!r} shape {shape} needs {expected} bytes, header declares {entry['nbytes']}"
            )
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if start < 0 or stop > len(payload):
            raise IntegrityError(f"{path}: tensor {name!r} byte range [{start}, {stop}) overflows payload")
        tensors[name] = np.frombuffer(payload[start:stop], dtype=dt).reshape(shape).copy()
    return Checkpoint(tensors, header.get("meta", {}))
