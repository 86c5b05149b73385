"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic    8 bytes  b"DMCACKPT"
    version  u32
    count    u32
    count x record:
        name_len u32, name (utf-8)
        dtype    1 byte  ('d' float64, 'f' float32, 'B' uint8)
        rank     u32
        extents  rank x u64
        payload  little-endian values, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParamStore
from .tensor import Tensor

MAGIC = b"DMCACKPT"
VERSION = 1
_DTYPES = {b"d": np.dtype("<f8"), b"f": np.dtype("<f4"), b"B": np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    code = _CODES.get(dt)
    if code is None:
        raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, code, struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<Q", n) for n in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def dumps(records: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(records))]
    out += [_encode_record(n, a) for n, a in records.items()]
    return b"".join(out)


def loads(buf: bytes) -> dict:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
    except struct.error:
        raise CheckpointError("truncated header") from None
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    records = {}
    name = "<header>"
    for k in range(count):
        name = f"<record {k}>"
        try:
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + n > len(buf):
                raise CheckpointError(f"record {k}: truncated name")
            name = buf[off:off + n].decode("utf-8")
            off += n
            code = buf[off:off + 1]
            off += 1
            if code not in _DTYPES:
                raise CheckpointError(f"record {name!r}: unknown dtype code {code!r}")
            dt = _DTYPES[code]
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
        except struct.error:
            raise CheckpointError(f"record {name!r}: truncated header") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise CheckpointError(f"record {name!r}: truncated payload")
        if name in records:
            raise CheckpointError(f"record {name!r}: duplicate name")
        records[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after record {name!r}")
    return records


def save(store: ParamStore, path, extra: dict | None = None):
    """Write ``store`` (plus optional raw ``extra`` records) to ``path``."""
    records = {n: t.data for n, t in store.items()}
    for n, a in (extra or {}).items():
        if n in records:
            raise CheckpointError(f"record {n!r}: clashes with a parameter name")
        records[n] = a
    Path(path).write_bytes(dumps(records))


def load(path, expected=None, extra_names=()) -> ParamStore:
    """Read a checkpoint back into a ParamStore.

    ``expected`` lists parameter names that must be present (a missing one is
    an error naming it). Names in ``extra_names`` are not turned into params;
    use :func:`load_records` to read them.
    """
    records = loads(Path(path).read_bytes())
    if expected is not None:
        for name in expected:
            if name not in records:
                raise CheckpointError(f"record {name!r}: missing from {path}")
    return ParamStore({n: Tensor(a) for n, a in records.items() if n not in extra_names})


def load_records(path) -> dict:
    return loads(Path(path).read_bytes())
