"""Binary tensor files.

Layout: magic ``MICT``, u32 version, u64 header length, a JSON index header,
then one record per tensor: u32 name length, UTF-8 name, u8 dtype tag,
u32 rank, rank x u64 extents, raw little-endian values. The header lists each
record's name, dtype, shape and byte offset from the start of the record area.
All integers are little-endian.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MICT"
VERSION = 1
DTYPE_TAGS = {"float32": 1, "float64": 2, "int64": 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _record(name: str, arr: np.ndarray) -> bytes:
    dtype = arr.dtype.name
    if dtype not in DTYPE_TAGS:
        raise TypeError(f"{name}: unsupported dtype {dtype}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<I", len(raw_name)) + raw_name
    head += struct.pack("<BI", DTYPE_TAGS[dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    records, index, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        rec = _record(name, arr)
        index.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(rec)})
        records.append(rec)
        offset += len(rec)
    header = json.dumps({"tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(records)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    start = 16
    header = json.loads(blob[start:start + hlen])
    base = start + hlen
    out = {}
    for entry in header["tensors"]:
        pos = base + entry["offset"]
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        if name != entry["name"] or list(shape) != entry["shape"]:
            raise ValueError(f"record {name!r} disagrees with the index")
        dtype = np.dtype(TAG_DTYPES[tag]).newbyteorder("<")
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(dumps(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
