"""Binary container used by every on-disk artifact.

Layout (all integers little-endian, unsigned):

    file    := magic '\\n' u64 n_records record*
    record  := u64 payload_bytes payload
    payload := u32 n_entries entry*
    entry   := u16 name_bytes name(utf-8) u8 tag body

Array entries (tags 0..5) continue with ``u8 rank, u64 dims[rank]`` followed by the
raw array data in C order.  Tag 6 is a JSON blob (``u64 length`` + utf-8 bytes) used
for nested metadata.  Each file family has its own magic string; the version suffix
is part of the magic, so a future v2 is a different magic and readers reject it
explicitly rather than misparse it.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import ContainerError

MAGIC_TEMPLATE = b"SYNMESH-TPL-v1"
MAGIC_DATASET = b"SYNMESH-DS-v1"
MAGIC_CHECKPOINT = b"SYNMESH-CKPT-v1"
MAGIC_PREDICTIONS = b"SYNMESH-PRED-v1"

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("bool"): 5,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}
_TAG_JSON = 6


def _coerce_array(value: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(value)
    if arr.dtype == np.float16:
        arr = arr.astype("<f4")
    if arr.dtype.kind == "f" and arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype("<f8")
    if arr.dtype.kind in "iu" and arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype("<i8")
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype not in _DTYPE_TAGS:
        raise ContainerError(f"unsupported array dtype {arr.dtype}")
    return arr


def _pack_record(entries: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(entries)))
    for name, value in entries.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        if isinstance(value, np.ndarray):
            arr = _coerce_array(value)
            buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        else:
            blob = json.dumps(value, sort_keys=True).encode("utf-8")
            buf.write(struct.pack("<B", _TAG_JSON))
            buf.write(struct.pack("<Q", len(blob)))
            buf.write(blob)
    return buf.getvalue()


class _Cursor:
    """Byte reader that reports the absolute offset of any failure."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"truncated container: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}",
                offset=self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_record(cur: _Cursor) -> dict:
    (n_entries,) = cur.unpack("<I")
    entries = {}
    for _ in range(n_entries):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        (tag,) = cur.unpack("<B")
        if tag == _TAG_JSON:
            (blob_len,) = cur.unpack("<Q")
            entries[name] = json.loads(cur.take(blob_len).decode("utf-8"))
        elif tag in _TAG_DTYPES:
            dtype = _TAG_DTYPES[tag]
            (rank,) = cur.unpack("<B")
            dims = cur.unpack(f"<{rank}Q") if rank else ()
            count = 1
            for d in dims:
                count *= d
            raw = cur.take(count * dtype.itemsize)
            entries[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        else:
            raise ContainerError(f"unknown entry tag {tag} at offset {cur.pos - 1}",
                                 offset=cur.pos - 1)
    return entries


def write_container(path, magic: bytes, records: list[dict]) -> None:
    """Write ``records`` (dicts of str -> ndarray | json-able) under ``magic``."""
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            payload = _pack_record(rec)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_container(path, magic: bytes) -> list[dict]:
    """Read all records from ``path``, validating the magic/version line."""
    with open(path, "rb") as fh:
        data = fh.read()
    newline = data.find(b"\n")
    if newline < 0 or newline > 64:
        raise ContainerError("not a container file: no magic line found", offset=0)
    found = data[:newline]
    if found != magic:
        family = magic.rsplit(b"-", 1)[0]
        if found.startswith(family + b"-"):
            raise ContainerError(
                f"container version mismatch: found {found.decode('ascii', 'replace')!r}, "
                f"expected {magic.decode('ascii')!r}",
                offset=0,
            )
        raise ContainerError(
            f"bad magic {found.decode('ascii', 'replace')!r}: expected {magic.decode('ascii')!r}",
            offset=0,
        )
    cur = _Cursor(data, newline + 1)
    (n_records,) = cur.unpack("<Q")
    records = []
    for _ in range(n_records):
        (payload_len,) = cur.unpack("<Q")
        end = cur.pos + payload_len
        rec = _unpack_record(cur)
        if cur.pos != end:
            raise ContainerError(
                f"record length mismatch: payload declared {payload_len} bytes, "
                f"parsed {cur.pos - (end - payload_len)}",
                offset=cur.pos,
            )
        records.append(rec)
    return records
