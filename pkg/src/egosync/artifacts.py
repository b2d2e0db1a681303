"""On-disk formats: tensor files, versioned checkpoints, line-delimited tables.

Tensor files are plain ``.npy`` (a self-describing dtype/shape header followed
by raw little-endian data). Checkpoints use their own container::

    magic (8 bytes) | version (u32) | header length (u32) | JSON header | payload

The JSON header records the checkpoint kind, free-form metadata, and for each
tensor its name, dtype, shape and byte offset into the payload, plus the
payload's SHA-256 so truncation and bit rot are caught on load.
"""

import hashlib
import io
import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .exceptions import CorruptCheckpoint, IoError, MissingArtifact

MAGIC = b"EGOSYNC\x00"
CHECKPOINT_VERSION = 1
FORMAT_VERSION = 1


def save_tensor(path, array):
    array = np.ascontiguousarray(array)
    if array.dtype == object:
        raise TypeError("object arrays cannot be stored as tensor files")
    try:
        with open(path, "wb") as f:
            np.save(f, array, allow_pickle=False)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_tensor(path):
    if not os.path.exists(path):
        raise MissingArtifact(f"tensor file not found: {path}")
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise IoError(f"malformed tensor file {path}: {exc}") from exc


def write_checkpoint(path, kind, tensors, meta=None):
    """Write named float/int arrays plus JSON-serializable ``meta``."""
    entries = []
    payload = io.BytesIO()
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value)
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": payload.tell(),
        })
        payload.write(arr.tobytes())
    body = payload.getvalue()
    header = json.dumps({
        "kind": kind,
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": len(body),
        "sha256": hashlib.sha256(body).hexdigest(),
    }, sort_keys=True).encode()
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
            f.write(header)
            f.write(body)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path, kind=None):
    """Return ``(tensors, meta)``; raises :class:`CorruptCheckpoint` on any defect."""
    if not os.path.exists(path):
        raise MissingArtifact(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic, not an egosync checkpoint")
    version, header_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(
            f"{path}: checkpoint version {version} is not supported "
            f"(expected version {CHECKPOINT_VERSION})"
        )
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start: start + header_len])
    except ValueError:
        raise CorruptCheckpoint(f"{path}: unreadable header") from None
    body = data[start + header_len:]
    if len(body) != header["payload_bytes"]:
        raise CorruptCheckpoint(
            f"{path}: payload is {len(body)} bytes, header declares {header['payload_bytes']}"
        )
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    if kind is not None and header["kind"] != kind:
        raise CorruptCheckpoint(f"{path}: holds a {header['kind']!r} checkpoint, expected {kind!r}")
    tensors = OrderedDict()
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


def write_records(path, header, rows):
    """Tab-separated table: one header row, then one record per line.

    Floats are written with ``repr`` so re-reading reproduces them exactly.
    """
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    try:
        with open(path, "w") as f:
            f.write("\t".join(header) + "\n")
            for row in rows:
                f.write("\t".join(fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_records(path):
    """Return ``(header, rows)`` with numeric fields converted back to numbers."""
    if not os.path.exists(path):
        raise MissingArtifact(f"table not found: {path}")

    def parse(v):
        for conv in (int, float):
            try:
                return conv(v)
            except ValueError:
                pass
        return v

    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        return [], []
    header = lines[0].split("\t")
    rows = [[parse(v) for v in line.split("\t")] for line in lines[1:] if line]
    return header, rows
