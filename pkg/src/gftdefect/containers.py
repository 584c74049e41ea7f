"""Versioned binary container shared by spectra, datasets and checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"GFTDCNT1"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header, keys sorted, no whitespace
    remainder     array blocks, back to back, in header order

The header is ``{"kind": ..., "meta": {...}, "arrays": [...]}`` where each
array entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the data section. Arrays are stored
C-contiguous with little-endian dtypes. No timestamps are written, so equal
inputs produce byte-identical files.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, InputOutputError

MAGIC = b"GFTDCNT1"


def _le(dtype):
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def write_container(path, kind, meta, arrays):
    """Write ``arrays`` (name -> ndarray, order preserved) to ``path``."""
    entries = []
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=_le(np.asarray(arr).dtype))
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blocks:
            fh.write(raw)


def read_container(path, kind=None):
    """Return ``(meta, arrays)``; checks magic and, if given, the kind."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    if data[:8] != MAGIC or len(data) < 16:
        raise FormatError(f"{path} is not a gftdefect container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"corrupt header in {path}") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path} holds a {header.get('kind')!r}, expected {kind!r}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise FormatError(f"truncated array {e['name']!r} in {path}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays
